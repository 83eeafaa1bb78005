"""Independent oracles shared by the test modules."""
import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > rtol * scale + atol
    assert not bad.any(), (
        f"{bad.sum()} entries off; worst rel err "
        f"{np.max(err / np.maximum(scale, 1e-300)):.3e}"
    )


def loop_mlp_forward(weights, biases, activations, x):
    """Per-element triple loop evaluation of an MLP (no numpy matmul)."""
    acts = {
        "relu": lambda v: v if v > 0 else 0.0,
        "tanh": np.tanh,
        "identity": lambda v: v,
    }
    rows = [list(map(float, r)) for r in np.atleast_2d(x)]
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out_rows = []
        for r in rows:
            out = []
            for j in range(w.shape[1]):
                s = float(b[j])
                for i in range(w.shape[0]):
                    s += r[i] * float(w[i, j])
                if layer < len(weights) - 1:
                    s = acts[activations[layer]](s)
                out.append(s)
            out_rows.append(out)
        rows = out_rows
    return np.array(rows)


def rel_err(analytic, numeric) -> float:
    """Norm-wise relative error, guarded against an all-zero reference."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), 1e-12))
