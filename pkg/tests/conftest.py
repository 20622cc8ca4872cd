import numpy as np
import pytest

from boxseg.autodiff import Tensor


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar f with respect to every entry."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_op_grads(op, *arrays, h=1e-5, tol=1e-6):
    """Finite-difference check of sum(op(...)) against every input array."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = out if out.data.size == 1 else None
    if loss is None:
        from boxseg.autodiff import tsum

        loss = tsum(out)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(a, i=i):
            args = [Tensor(t2.data) for t2 in tensors]
            args[i] = Tensor(a)
            o = op(*args)
            return float(o.data.sum())

        num = numeric_grad(f, t.data.copy(), h=h)
        worst = max(worst, rel_err(t.grad, num))
    assert worst < tol, f"gradient mismatch: {worst:.3e}"
    return worst


def bfs_components(mask, connectivity):
    """Flood-fill labelling oracle, raster-scan seed order."""
    mask = np.asarray(mask)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 4:
        neigh = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        neigh = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    current = 0
    sizes = [0]
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                current += 1
                queue = [(r, c)]
                labels[r, c] = current
                count = 0
                while queue:
                    rr, cc = queue.pop()
                    count += 1
                    for dr, dc in neigh:
                        nr, nc = rr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = current
                            queue.append((nr, nc))
                sizes.append(count)
    return labels, np.array(sizes, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
