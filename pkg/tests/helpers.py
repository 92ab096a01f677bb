"""Independent oracles shared across the test suite.

These stay deliberately naive: the reference convolution is six explicit
loops, gradients come from central finite differences, and dense matrix
forms are assembled directly, so they exercise none of the code paths
they check.
"""

import numpy as np


def naive_conv2d(x, kernel, stride=1, pad=0):
    """Reference cross-correlation via six explicit loops."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if pad > 0:
        xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    xp[b, ci, y * stride + i, xx * stride + j]
                                    * kernel[co, ci, i, j]
                                )
                    out[b, co, y, xx] = acc
    return out


def block_diag_kernel(kernels):
    """Assemble the single kernel equivalent to a group convolution."""
    cout = sum(k.shape[0] for k in kernels)
    cin = sum(k.shape[1] for k in kernels)
    kh, kw = kernels[0].shape[2:]
    full = np.zeros((cout, cin, kh, kw), dtype=kernels[0].dtype)
    ro = co = 0
    for k in kernels:
        full[ro : ro + k.shape[0], co : co + k.shape[1]] = k
        ro += k.shape[0]
        co += k.shape[1]
    return full


def fd_gradient(loss_fn, arr, coords, h=1e-5):
    """Central finite differences of a scalar loss at chosen flat coords.

    ``loss_fn`` recomputes the loss from the array's current contents;
    ``arr`` is modified in place and restored.
    """
    flat = arr.reshape(-1)
    grads = np.zeros(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = float(loss_fn())
        flat[c] = orig - h
        fm = float(loss_fn())
        flat[c] = orig
        grads[i] = (fp - fm) / (2.0 * h)
    return grads


def max_rel_error(analytic, numeric):
    """Worst |a - f| / max(|a|, |f|, 1): relative for O(1) gradients,
    absolute near zero."""
    worst = 0.0
    for a, f in zip(np.asarray(analytic).ravel(), np.asarray(numeric).ravel()):
        worst = max(worst, abs(a - f) / max(abs(a), abs(f), 1.0))
    return worst


def zero_branch_weights(branch):
    """Zero every conv kernel so the branch computes exactly 0 with fresh
    (zero-mean, unit-variance) BN statistics in eval mode."""
    for layer in branch.layers:
        layer.weight.data = np.zeros_like(layer.weight.data)
    return branch


def dense_merge_matrix(k, d):
    """Independent construction of the merge mapping matrix."""
    m = np.zeros((k * d, k * d))
    for bi in range(k):
        for bj in range(k):
            for i in range(d):
                m[bi * d + i, bj * d + i] = 1.0 / k
    return m
