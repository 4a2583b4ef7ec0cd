"""Metrics, the FLOPs accountant, trade-off sweeps, and per-loop reports.

PCK counts joints strictly below a threshold; AUC is the normalized trapezoid
of the PCK curve over a threshold range. FLOPs follow fixed prices: a conv
costs 2*K^2*Cin*Cout*Hout*Wout, a linear 2*in*out, batch norm / activations /
pooling one FLOP per output element, pixel shuffle nothing; layers outside
these categories (residual adds, the attention product, kinematics) are free.

Evaluation runs every loop in one batched pass, then picks each sample's exit
loop afterwards. Exit decisions draw per-sample generators seeded from
(seed, dataset index), so results do not depend on batching or worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from .backbone import ModelConfig
from .diffengine import Tensor, no_grad
from .gating import EXIT
from .posehead import POSE_VEC_LEN, joint_errors, per_sample_losses
from .uncertainty import N_COORDS_2D, N_COORDS_3D, sample_mean_variance

MECHANISMS = ("none", "threshold", "learned")
AUC_POINTS = 100


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pck(errors, tau: float) -> float:
    """Fraction of joints with error strictly below tau."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("pck needs at least one error value")
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    return float(np.mean(e < tau))


def auc(errors, lo: float, hi: float, k: int = AUC_POINTS) -> float:
    """Normalized trapezoidal area under PCK(tau) for tau in [lo, hi]."""
    if not hi > lo or lo < 0:
        raise ValueError(f"need hi > lo >= 0, got [{lo}, {hi}]")
    if k < 2:
        raise ValueError(f"need at least 2 threshold points, got {k}")
    taus = np.linspace(lo, hi, k)
    curve = np.array([pck(errors, t) for t in taus])
    return float(np.trapezoid(curve, taus) / (hi - lo))


def pck_curve(errors, lo: float, hi: float, k: int = AUC_POINTS):
    taus = np.linspace(lo, hi, k)
    return [[float(t), pck(errors, t)] for t in taus]


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of size >= 2")

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        # average the ranks within tied groups
        for u in np.unique(v):
            mask = v == u
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

def _conv_flops(k: int, cin: int, cout: int, out_hw: int) -> int:
    return 2 * k * k * cin * cout * out_hw * out_hw


def _block_flops(cin: int, cout: int, out_hw: int) -> int:
    """One residual block: two 3x3 convs, 1x1 shortcut, three BNs, two ReLUs."""
    area = out_hw * out_hw
    total = _conv_flops(3, cin, cout, out_hw)       # conv1, stride 2
    total += _conv_flops(3, cout, cout, out_hw)     # conv2
    total += _conv_flops(1, cin, cout, out_hw)      # shortcut
    total += 3 * cout * area                        # batch norms
    total += 2 * cout * area                        # relu after bn1, after add
    return total


def count_flops(cfg: ModelConfig) -> dict:
    """Per-component FLOPs table for one sample.

    Returns extractor cost (paid once), per-loop cost (refiner + attention
    decoder + heads, constant across loops), and the cumulative cost when
    exiting at each loop: fe + (l+1) * per_loop.
    """
    cfg.validate()
    c, s = cfg.base_channels, cfg.input_size
    split = cfg.loop_point - 1
    specs = [(c, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]
    sizes = [s // 4, s // 8, s // 16, s // 32]      # stage output extents

    stem = _conv_flops(3, 3, c, s // 2) + 2 * c * (s // 2) ** 2
    fe = stem + sum(_block_flops(i, o, hw)
                    for (i, o), hw in zip(specs[:split], sizes[:split]))
    rf = sum(_block_flops(i, o, hw)
             for (i, o), hw in zip(specs[split:], sizes[split:]))

    amg = 0
    if cfg.amg_mode == "attention":
        ch, hw = cfg.latent_dim, cfg.deepest_size
        for _ in range(5 - cfg.loop_point):
            shuffled, hw = ch // 4, hw * 2
            out = max(shuffled, 4)
            amg += _conv_flops(3, shuffled, out, hw) + out * hw * hw  # conv+relu
            ch = out
        amg += _conv_flops(1, ch, cfg.feature_channels, hw)
        amg += cfg.feature_channels * hw * hw                         # sigmoid

    latent, fc = cfg.latent_dim, cfg.fc_width
    heads = latent                                   # global average pool
    heads += 2 * latent * fc + fc + 2 * fc * POSE_VEC_LEN
    hidden = fc // 2
    heads += 2 * latent * hidden + hidden + 2 * hidden * (N_COORDS_2D + N_COORDS_3D)

    per_loop = rf + amg + heads
    return {
        "fe": fe,
        "per_loop": per_loop,
        "components": {"stem": stem, "fe_stages": fe - stem, "rf": rf,
                       "amg": amg, "heads": heads},
        "cumulative": [fe + (l + 1) * per_loop for l in range(cfg.l_max + 1)],
    }


def average_flops(counts: dict, avg_loops: float) -> float:
    return counts["fe"] + (avg_loops + 1.0) * counts["per_loop"]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _collect(net, images, j2d, j3d, indices=None):
    """Per-sample raw measurements for every loop, eval mode, batched.

    Returns dict with err2d/err3d (N, L+1, 21), var (N, L+1), gate exit
    probabilities (N, L+1) or None.
    """
    net.eval()
    n, l_max = len(images), net.cfg.l_max
    err2 = np.empty((n, l_max + 1, net.cfg.num_joints))
    err3 = np.empty_like(err2)
    var = np.empty((n, l_max + 1))
    p_exit = np.empty((n, l_max + 1)) if net.gate is not None else None
    batch = 125
    with no_grad():
        for i in range(0, n, batch):
            outs = net.forward_loop(Tensor(images[i:i + batch]))
            for l, out in enumerate(outs):
                e2, e3 = joint_errors(out.j2d, out.j3d,
                                      j2d[i:i + batch], j3d[i:i + batch])
                err2[i:i + batch, l] = e2
                err3[i:i + batch, l] = e3
                var[i:i + batch, l] = sample_mean_variance(out.var)
                if p_exit is not None:
                    p_exit[i:i + batch, l] = net.gate.probs(out.var.f)[:, EXIT]
    return {"err2d": err2, "err3d": err3, "var": var, "p_exit": p_exit}


_WORKER_NET = None


def _eval_worker_init(net):
    global _WORKER_NET
    _WORKER_NET = net


def _eval_worker(args):
    images, j2d, j3d = args
    return _collect(_WORKER_NET, images, j2d, j3d)


def collect_measurements(net, data, jobs: int = 1) -> dict:
    if jobs <= 1:
        return _collect(net, data.images, data.j2d, data.j3d)
    bounds = np.linspace(0, len(data.images), jobs * 2 + 1, dtype=int)
    tasks = [(data.images[a:b], data.j2d[a:b], data.j3d[a:b])
             for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_eval_worker_init,
                             initargs=(net,)) as pool:
        parts = list(pool.map(_eval_worker, tasks))
    out = {}
    for key in parts[0]:
        if parts[0][key] is None:
            out[key] = None
        else:
            out[key] = np.concatenate([p[key] for p in parts], axis=0)
    return out


def exit_loops(meas: dict, mechanism: str, l_max: int, tau_var: float | None = None,
               seed: int = 0, indices=None) -> np.ndarray:
    """Per-sample exit loop under a gating mechanism.

    Threshold gating continues while the mean predicted variance stays above
    tau_var. Learned gating samples exit-vs-continue per loop from the gate's
    tempered softmax, one generator per sample seeded by (seed, index). The
    final loop always exits.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    n = len(meas["err2d"])
    if mechanism == "none":
        return np.full(n, l_max, dtype=int)
    if mechanism == "threshold":
        if tau_var is None:
            raise ValueError("threshold mechanism needs tau_var")
        exits = np.full(n, l_max, dtype=int)
        for i in range(n):
            for l in range(l_max + 1):
                if not meas["var"][i, l] > tau_var:
                    exits[i] = l
                    break
        return exits
    if meas["p_exit"] is None:
        raise ValueError("learned mechanism needs a network with a gate attached")
    idx = np.arange(n) if indices is None else np.asarray(indices)
    exits = np.full(n, l_max, dtype=int)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(idx[i])]))
        for l in range(l_max):
            if rng.random() < meas["p_exit"][i, l]:
                exits[i] = l
                break
    return exits


def auc_ranges(cfg: ModelConfig) -> tuple:
    """Default threshold ranges: [0, 0.5*H/8] px in 2D, [0, 0.5] units in 3D."""
    return (0.0, 0.5 * cfg.input_size / 8.0), (0.0, 0.5)


def evaluate(net, data, mechanism: str = "none", tau_var: float | None = None,
             seed: int = 0, jobs: int = 1, indices=None) -> dict:
    """Full evaluation report for one gating mechanism."""
    cfg = net.cfg
    meas = collect_measurements(net, data, jobs)
    exits = exit_loops(meas, mechanism, cfg.l_max, tau_var, seed, indices)
    n = len(exits)
    rows = np.arange(n)
    e2_exit = meas["err2d"][rows, exits]        # (N, 21)
    e3_exit = meas["err3d"][rows, exits]
    (lo2, hi2), (lo3, hi3) = auc_ranges(cfg)
    counts = count_flops(cfg)
    avg_loops = float(exits.mean())
    avg = average_flops(counts, avg_loops)
    hist = np.bincount(exits, minlength=cfg.l_max + 1)
    report = {
        "n": n,
        "mechanism": mechanism,
        "tau_var": tau_var,
        "gate_tau": net.gate.tau if net.gate is not None else None,
        "seed": seed,
        "per_loop": {
            "err2d": meas["err2d"].mean(axis=(0, 2)).tolist(),
            "err3d": meas["err3d"].mean(axis=(0, 2)).tolist(),
            "mean_variance": meas["var"].mean(axis=0).tolist(),
        },
        "exit": {
            "err2d": float(e2_exit.mean()),
            "err3d": float(e3_exit.mean()),
            "auc_2d": auc(e2_exit, lo2, hi2),
            "auc_3d": auc(e3_exit, lo3, hi3),
            "pck_2d": pck_curve(e2_exit, lo2, hi2),
            "pck_3d": pck_curve(e3_exit, lo3, hi3),
            "avg_loops": avg_loops,
            "histogram": hist.tolist(),
        },
        "flops": {
            "fe": counts["fe"],
            "per_loop": counts["per_loop"],
            "cumulative": counts["cumulative"],
            "avg": avg,
            "avg_gflops": avg / 1e9,
        },
        "auc_range_2d": [lo2, hi2],
        "auc_range_3d": [lo3, hi3],
        "config": asdict(cfg),
    }
    return report


# ---------------------------------------------------------------------------
# sweeps and per-loop reports
# ---------------------------------------------------------------------------

def tradeoff_sweep(net, data, mechanism: str, values, seed: int = 0,
                   jobs: int = 1) -> list:
    """One evaluation row per knob value: (value, auc_3d, auc_2d, avg_loops,
    avg_gflops). Mechanism 'tau_var' sweeps the variance threshold, 'tau_gate'
    the learned gate's softmax temperature."""
    if mechanism not in ("tau_var", "tau_gate"):
        raise ValueError(f"sweep mechanism must be tau_var or tau_gate, "
                         f"got {mechanism!r}")
    if list(values) != sorted(values):
        raise ValueError("sweep values must be sorted ascending")
    meas = collect_measurements(net, data, jobs)
    cfg = net.cfg
    (lo2, hi2), (lo3, hi3) = auc_ranges(cfg)
    counts = count_flops(cfg)
    rows = []
    saved_tau = net.gate.tau if net.gate is not None else None
    try:
        for v in values:
            if mechanism == "tau_var":
                exits = exit_loops(meas, "threshold", cfg.l_max, tau_var=v,
                                   seed=seed)
            else:
                if net.gate is None:
                    raise ValueError("tau_gate sweep needs a gate attached")
                net.gate.tau = float(v)
                m2 = collect_measurements(net, data, jobs)
                exits = exit_loops(m2, "learned", cfg.l_max, seed=seed)
                meas = m2
            idx = np.arange(len(exits))
            e2 = meas["err2d"][idx, exits]
            e3 = meas["err3d"][idx, exits]
            avg_loops = float(exits.mean())
            rows.append({
                "knob": float(v),
                "auc_3d": auc(e3, lo3, hi3),
                "auc_2d": auc(e2, lo2, hi2),
                "avg_loops": avg_loops,
                "avg_gflops": average_flops(counts, avg_loops) / 1e9,
            })
    finally:
        if saved_tau is not None:
            net.gate.tau = saved_tau
    return rows


def sweep_csv(rows, config_echo: dict | None = None,
              input_hashes: dict | None = None) -> str:
    lines = []
    if config_echo is not None:
        lines.append("# config: " + json.dumps(config_echo, sort_keys=True))
    for name, digest in sorted((input_hashes or {}).items()):
        lines.append(f"# input {name}: {digest}")
    lines.append("knob,auc_3d,auc_2d,avg_loops,avg_gflops")
    for r in rows:
        lines.append(f"{r['knob']:.6g},{r['auc_3d']:.6f},{r['auc_2d']:.6f},"
                     f"{r['avg_loops']:.4f},{r['avg_gflops']:.6f}")
    return "\n".join(lines) + "\n"


def permutation_test(x, y, n_perm: int = 2000, seed: int = 0) -> float:
    """Two-sample permutation test on the difference of means (two-sided)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ValueError("need at least 2 values per sample")
    pool = np.concatenate([x, y])
    obs = abs(x.mean() - y.mean())
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(pool)
        stat = abs(perm[:x.size].mean() - perm[x.size:].mean())
        count += stat >= obs - 1e-12
    return float((1 + count) / (1 + n_perm))


def per_sample_total_loss(net, data, gamma_2d=1.0, gamma_3d=1.0, gamma_var=1.0,
                          w_theta=1e-3, w_beta=1e-2) -> np.ndarray:
    """(N, l_max+1) weighted per-sample training loss at every loop."""
    net.eval()
    n, l_max = len(data.images), net.cfg.l_max
    totals = np.empty((n, l_max + 1))
    batch = 125
    with no_grad():
        for i in range(0, n, batch):
            outs = net.forward_loop(Tensor(data.images[i:i + batch]))
            g2 = data.j2d[i:i + batch]
            g3 = data.j3d[i:i + batch]
            for l, out in enumerate(outs):
                l2, l3 = per_sample_losses(out.j2d, out.j3d, g2, g3)
                a2 = out.var.alpha_2d.data.astype(np.float64)
                a3 = out.var.alpha_3d.data.astype(np.float64)
                d2 = out.j2d.data.astype(np.float64) - g2.reshape(len(g2), -1, 2)
                d3 = out.j3d.data.astype(np.float64) - g3.reshape(len(g3), -1, 3)
                h = np.abs(d2).reshape(len(g2), -1)
                hub = np.where(h <= 1.0, 0.5 * h * h, h - 0.5)
                sq = (d3 * d3).reshape(len(g3), -1)
                lv2 = (np.exp(-a2) * (hub - 0.5) + a2 / 2).mean(axis=1)
                lv3 = (np.exp(-a3) / 2 * sq + a3 / 2).mean(axis=1)
                th = out.pose.theta.data.astype(np.float64)
                be = out.pose.beta.data.astype(np.float64)
                reg = (w_theta * (th * th).sum(axis=1)
                       + w_beta * ((be - 1) ** 2).sum(axis=1))
                totals[i:i + batch, l] = (gamma_2d * l2 + gamma_3d * l3
                                          + gamma_var * (lv2 + lv3) + reg)
    return totals


def per_loop_report(net, data, gamma_2d=1.0, gamma_3d=1.0, gamma_var=1.0,
                    n_perm: int = 2000, seed: int = 0) -> dict:
    """Loss distribution per loop plus a first-vs-last permutation test."""
    totals = per_sample_total_loss(net, data, gamma_2d, gamma_3d, gamma_var)
    loops = []
    for l in range(totals.shape[1]):
        q = [float(v) for v in np.quantile(totals[:, l], [0.0, 0.25, 0.5, 0.75, 1.0])]
        loops.append({"loop": l, "min": q[0], "q1": q[1], "median": q[2],
                      "q3": q[3], "max": q[4], "mean": float(totals[:, l].mean())})
    p = permutation_test(totals[:, 0], totals[:, -1], n_perm, seed)
    return {"n": len(totals), "loops": loops,
            "first_vs_last_p": p, "config": asdict(net.cfg)}
