"""Central finite-difference gradient checking in float64."""

import numpy as np

REL_FLOOR = 1e-6


def max_rel_error(loss_fn, params, probes=12, h=1e-5, seed=0):
    """Compare analytic and numeric gradients at ``probes`` random coordinates per parameter.

    ``loss_fn()`` must rebuild the graph from ``params`` (float64 tensors) and
    return a scalar tensor. Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = float(loss_fn().data)
            flat[idx] = old - h
            down = float(loss_fn().data)
            flat[idx] = old
            num = (up - down) / (2 * h)
            ana = a.reshape(-1)[idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR))
    return worst


def model_gradient_errors(seed=0, probes=12):
    """Worst relative gradient error for toy CNN, BGRU-FF and BGRU-FT models in training mode."""
    from omoq.autodiff import ops
    from omoq.models import CnnModel, CnnSpec, RnnFfModel, RnnFfSpec, RnnFtModel, RnnFtSpec, pad_batch

    rng = np.random.default_rng(seed)
    out = {}

    cnn = CnnModel(CnnSpec(in_height=16, in_width=16, channels=(2, 3, 2, 2), kernels=(3, 3, 1, 1),
                           fc_sizes=(4, 4, 4), dropout=0.2), seed=seed, dtype=np.float64)
    panes = rng.standard_normal((3, 1, 16, 16))
    y = rng.uniform(0, 1, 3)
    out["cnn"] = max_rel_error(
        lambda: ops.rmse_loss(cnn.forward(panes, training=True, rng=np.random.default_rng(1)), y),
        cnn.parameters(), probes, seed=seed)

    feats = [rng.standard_normal((n, 3)) for n in (5, 3, 4)]
    batch, mask, lengths = pad_batch(feats, np.float64)
    ff = RnnFfModel(RnnFfSpec(input_dim=3, hidden=2, fc_sizes=(4, 3), dropout=0.2), seed=seed, dtype=np.float64)
    out["bgru-ff"] = max_rel_error(
        lambda: ops.rmse_loss(ff.forward(batch, mask, lengths, training=True, rng=np.random.default_rng(1)), y),
        ff.parameters(), probes, seed=seed)

    ft = RnnFtModel(RnnFtSpec(input_dim=3, hidden=2, dropout=0.2), seed=seed, dtype=np.float64)
    out["bgru-ft"] = max_rel_error(
        lambda: ops.masked_frame_mse(ft.forward(batch, mask, training=True, rng=np.random.default_rng(1)), y, mask)[0],
        ft.parameters(), probes, seed=seed)
    return out
