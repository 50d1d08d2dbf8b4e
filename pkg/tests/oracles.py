"""Scalar-loop reference implementations used as test oracles."""
import numpy as np


def naive_analysis(x, w, s):
    """Zero-padded stride-s correlation with nested loops."""
    M, P, _ = w.shape
    c = (P - 1) // 2
    H, W = x.shape
    out = np.zeros((M, H // s, W // s))
    for m in range(M):
        for i in range(H // s):
            for j in range(W // s):
                acc = 0.0
                for p in range(P):
                    for q in range(P):
                        r, col = i * s + p - c, j * s + q - c
                        if 0 <= r < H and 0 <= col < W:
                            acc += w[m, p, q] * x[r, col]
                out[m, i, j] = acc
    return out


def naive_synthesis(z, w, s):
    M, P, _ = w.shape
    c = (P - 1) // 2
    _, h, wd = z.shape
    H, W = h * s, wd * s
    out = np.zeros((H, W))
    for m in range(M):
        for i in range(h):
            for j in range(wd):
                for p in range(P):
                    for q in range(P):
                        r, col = i * s + p - c, j * s + q - c
                        if 0 <= r < H and 0 <= col < W:
                            out[r, col] += w[m, p, q] * z[m, i, j]
    return out


def naive_st(v, t):
    if v > t:
        return v - t
    if v < -t:
        return v + t
    return 0.0


def naive_forward(theta, y, sigma):
    """Straight-line evaluation of the unrolled iteration, scalar thresholding."""
    c = theta.config
    f = theta.filters
    tau0, tau1 = theta.tau(0), theta.tau(1)
    z = np.zeros((c.M, y.shape[0] // c.stride, y.shape[1] // c.stride))
    for k in range(c.K):
        u = z - naive_analysis(naive_synthesis(z, f.B[k], c.stride) - y, f.A[k], c.stride)
        for m in range(c.M):
            t = tau0[k, m] + tau1[k, m] * sigma / 255.0
            z[m] = np.vectorize(lambda v: naive_st(v, t))(u[m])
    return naive_synthesis(z, f.D, c.stride)


def dense_operator(w, H, W, s):
    """Matrix of analysis_conv built column by column from unit images."""
    cols = []
    for n in range(H * W):
        e = np.zeros(H * W)
        e[n] = 1.0
        cols.append(naive_analysis(e.reshape(H, W), w, s).ravel())
    return np.array(cols).T  # (M*h*w, H*W)
