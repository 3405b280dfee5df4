"""Multi-seed experiment driver: train, linearise, fit precisions, predict, record."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as datasets
from . import invariance, io, laplace, model
from .errors import LlapError
from .objectives import Likelihood, train_map
from .precision import PrecisionSpec

log = logging.getLogger(__name__)

VARIANT_OF = {"naive": "simple", "star-full": "full", "star-simple": "simple"}


def build_data(cfg, seed):
    """``(train, test)``; toy data is redrawn per seed, image data is fixed."""
    d = cfg.data
    if d.train_images is None:
        return datasets.gen_toy_regression(seed, d.n_train, d.n_test)
    train = datasets.load_idx_pair(d.train_images, d.train_labels, d.classes, d.downsample, d.train_limit)
    test = datasets.load_idx_pair(d.test_images, d.test_labels, d.classes, d.downsample, d.test_limit)
    return train, test


def build_likelihood(cfg):
    return Likelihood(cfg.likelihood.kind, cfg.likelihood.noise_std ** 2)


def build_arch(cfg, train, n_classes=None):
    m = cfg.model
    if cfg.likelihood.kind == "gaussian":
        out_dim = 1 if train.y.ndim == 1 else train.y.shape[1]
    else:
        out_dim = n_classes or (len(cfg.data.classes) if cfg.data.classes else int(np.max(train.y)) + 1)
    hidden = tuple(model.HiddenLayer(int(w), bias=m.bias, layer_norm=m.layer_norm, ln_affine=m.ln_affine)
                   for w in m.hidden)
    return model.Architecture(train.X.shape[1], out_dim, hidden, activation=m.activation, slope=m.slope,
                              output_bias=m.output_bias)


def train_seed(cfg, seed, train, arch, lik, checkpoint_epochs=()):
    tcfg = dataclasses.replace(cfg.train, seed=seed, checkpoint_epochs=tuple(checkpoint_epochs))
    return train_map(arch, lik, train, None, tcfg)


@dataclasses.dataclass
class Fit:
    lin: laplace.Linearisation
    curv: laplace.Curvature
    theta: model.GroupedParams
    precision: PrecisionSpec
    report: laplace.EvidenceReport


def fit_objective(arch, params, train, lik, objective, tying, include_biases, ecfg):
    """Steps 2-3 of the protocol for one objective tag.

    ``naive`` maximises the evidence with the trained weights in the norm;
    ``star-*`` finds the joint optimum of the linear model and the evidence.
    """
    lin = laplace.linearise(arch, params, train.X, variant=VARIANT_OF[objective], include_biases=include_biases)
    curv = laplace.ggn(lin, lik)
    init = PrecisionSpec.isotropic(lin.groups, ecfg.initial_precision, tying)
    if objective == "naive":
        report = laplace.maximise_evidence(lin.theta0, curv, init, method=ecfg.method,
                                           max_jitter=ecfg.max_jitter)
        return Fit(lin, curv, lin.theta0, report.precision, report)
    theta, prec, report = laplace.em_alternate(lin, lik, train.y, curv, init, method=ecfg.method,
                                               grad_mode=ecfg.grad_mode, nn_init=ecfg.nn_init,
                                               max_jitter=ecfg.max_jitter)
    return Fit(lin, curv, theta, prec, report)


def evaluate(fit, lik, test, ecfg, seed):
    post = laplace.predictive(fit.lin, fit.curv, fit.precision, test.X, max_jitter=ecfg.max_jitter)
    nll = laplace.predictive_nll(post, lik, test.y, mc_samples=ecfg.mc_samples, seed=seed)
    return post, nll


def _record(cfg, seed, kind, objective, tying, fit, test_nll=None, extras=None):
    rep = fit.report
    return io.MetricsRecord(seed=seed, kind=kind, objective=objective, tying=tying,
                            lam=fit.precision.as_dict(), evidence=rep.evidence, test_nll=test_nll,
                            jitter=rep.jitter, converged=rep.converged,
                            extras={"rounds": rep.rounds, "iterations": rep.iterations,
                                    "grad_norm": rep.grad_norm, "degenerate": list(rep.degenerate),
                                    "gamma": rep.gamma, "n_params": fit.lin.n_params, **(extras or {})})


def _failure(seed, kind, objective, tying, exc):
    log.error("seed %d %s/%s failed: %s", seed, kind, objective, exc)
    return io.MetricsRecord(seed=seed, kind=kind, objective=objective, tying=tying, converged=False,
                            extras={"error": f"{type(exc).__name__}: {exc}"})


def _curve_path(cfg, name):
    path = os.path.join(cfg.out, "curves")
    os.makedirs(path, exist_ok=True)
    return os.path.join(path, name)


def run_seed(cfg, seed, predict=True, write_curves=True):
    """Protocol for one seed; failures of one objective are recorded and the rest continue."""
    kind = "classification" if cfg.likelihood.kind == "categorical" else "toy-regression"
    lik = build_likelihood(cfg)
    try:
        train, test = build_data(cfg, seed)
        arch = build_arch(cfg, train)
        params = train_seed(cfg, seed, train, arch, lik).params
    except LlapError as exc:
        return [_failure(seed, kind, obj, cfg.tying, exc) for obj in cfg.objectives]
    records, ref_mean = [], None
    for obj in cfg.objectives:
        try:
            fit = fit_objective(arch, params, train, lik, obj, cfg.tying, cfg.include_biases, cfg.evidence)
            extras, nll = {}, None
            if predict:
                post, nll = evaluate(fit, lik, test, cfg.evidence, seed)
                if ref_mean is None:
                    ref_mean = post.mean
                extras["mean_max_abs_diff"] = float(np.max(np.abs(post.mean - ref_mean)))
                extras["mean_std"] = float(np.mean(post.std))
                extras["psd"] = bool(post.is_psd())
                if write_curves and test.X.shape[1] == 1 and post.mean.shape[1] == 1:
                    io.write_curve(_curve_path(cfg, f"seed{seed}_{obj}_{cfg.tying}.csv"),
                                   test.X[:, 0], post.mean[:, 0], post.std[:, 0])
            records.append(_record(cfg, seed, kind, obj, cfg.tying, fit, nll, extras))
        except LlapError as exc:
            records.append(_failure(seed, kind, obj, cfg.tying, exc))
    return records


def _threads():
    try:
        return max(1, int(os.environ.get("LLAP_THREADS", "1")))
    except ValueError:
        return 1


def map_seeds(fn, cfg, *args):
    """Apply ``fn(cfg, seed, *args)`` to every seed; results come back in seed order."""
    n = min(_threads(), len(cfg.seeds))
    if n <= 1:
        return [fn(cfg, s, *args) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, [cfg] * len(cfg.seeds), cfg.seeds, *[[a] * len(cfg.seeds) for a in args]))


def run_pipeline(cfg, predict=True):
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.kind == "verify":
        records = verify(cfg)
    elif cfg.kind == "k-scan":
        records = kscan(cfg)
    elif cfg.kind == "early-stop":
        records = earlystop_scan(cfg)
    else:
        records = [r for recs in map_seeds(run_seed, cfg, predict) for r in recs]
    io.write_metrics(records, os.path.join(cfg.out, "metrics.ndjson"))
    return records


def train_only(cfg):
    """Train every seed and save the final parameters as checkpoints."""
    os.makedirs(os.path.join(cfg.out, "checkpoints"), exist_ok=True)
    lik = build_likelihood(cfg)
    records = []
    for seed in cfg.seeds:
        train, _ = build_data(cfg, seed)
        arch = build_arch(cfg, train)
        res = train_seed(cfg, seed, train, arch, lik)
        path = os.path.join(cfg.out, "checkpoints", f"seed{seed}.ckpt")
        io.write_checkpoint(res.params, path)
        records.append(io.MetricsRecord(seed=seed, kind="train", objective="none", tying=cfg.tying,
                                        evidence=None, extras={"final_loss": res.losses[-1] if res.losses else None,
                                                               "checkpoint": path, "n_params": arch.n_params}))
    io.write_metrics(records, os.path.join(cfg.out, "metrics.ndjson"))
    return records


def _kscan_seed(cfg, seed):
    lik = build_likelihood(cfg)
    train, test = build_data(cfg, seed)
    arch = build_arch(cfg, train)
    params = train_seed(cfg, seed, train, arch, lik).params
    records = []
    for tying in cfg.kscan.tyings:
        profiles = {}
        for k in cfg.kscan.k:
            fit = fit_objective(arch, model.scale_group(params, k), train, lik, cfg.kscan.objective, tying,
                                cfg.include_biases, cfg.evidence)
            post, nll = evaluate(fit, lik, test, cfg.evidence, seed)
            profiles[k] = (fit, post, nll)
        ref = profiles[1.0][1].std
        for k, (fit, post, nll) in profiles.items():
            dev = float(np.max(np.abs(post.std - ref) / ref))
            records.append(_record(cfg, seed, "k-scan", cfg.kscan.objective, tying, fit, nll,
                                   {"k": k, "rel_dev_vs_k1": dev, "std_profile": post.std[:, 0].tolist(),
                                    "psd": bool(post.is_psd())}))
            if test.X.shape[1] == 1:
                io.write_curve(_curve_path(cfg, f"kscan_seed{seed}_{tying}_k{k:g}.csv"),
                               test.X[:, 0], post.mean[:, 0], post.std[:, 0])
    return records


def kscan(cfg, k_set=None):
    """Predictive std-dev profiles at rescaled linearisation points, for each tying mode."""
    if k_set is not None:
        cfg = dataclasses.replace(cfg, kscan=dataclasses.replace(cfg.kscan, k=tuple(k_set)))
    os.makedirs(cfg.out, exist_ok=True)
    return [r for recs in map_seeds(_kscan_seed, cfg) for r in recs]


def _earlystop_seed(cfg, seed):
    lik = build_likelihood(cfg)
    train, test = build_data(cfg, seed)
    arch = build_arch(cfg, train)
    res = train_seed(cfg, seed, train, arch, lik, cfg.earlystop.checkpoints)
    ckpt_dir = os.path.join(cfg.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    records = []
    star = cfg.earlystop.star_objective
    for epoch in cfg.earlystop.checkpoints:
        params = res.checkpoints[epoch]
        io.write_checkpoint(params, os.path.join(ckpt_dir, f"seed{seed}_epoch{epoch}.ckpt"))
        fits, posts, nlls = {}, {}, {}
        for obj in ("naive", star):
            fits[obj] = fit_objective(arch, params, train, lik, obj, cfg.tying, cfg.include_biases, cfg.evidence)
            posts[obj], nlls[obj] = evaluate(fits[obj], lik, test, cfg.evidence, seed)
        dist = invariance.posterior_distance(posts["naive"], posts[star])
        for obj in ("naive", star):
            records.append(_record(cfg, seed, "early-stop", obj, cfg.tying, fits[obj], nlls[obj],
                                   {"epoch": epoch, "distance": dist, "psd": bool(posts[obj].is_psd())}))
    return records


def earlystop_scan(cfg, checkpoints=None):
    """Wasserstein-2 distance between the two predictive posteriors at each training checkpoint."""
    if checkpoints is not None:
        cfg = dataclasses.replace(cfg, earlystop=dataclasses.replace(cfg.earlystop,
                                                                    checkpoints=tuple(checkpoints)))
    os.makedirs(cfg.out, exist_ok=True)
    return [r for recs in map_seeds(_earlystop_seed, cfg) for r in recs]


def appendix_net():
    """1-2-1 network: layer norm after a bias-free input layer, bias-free read-out (4 parameters)."""
    return model.Architecture(1, 1, (model.HiddenLayer(2, bias=False, layer_norm=True),), output_bias=False)


def _check_record(seed, report, expected):
    return io.MetricsRecord(seed=seed, kind="verify", objective=report.name,
                            tying=str(report.details.get("tying", "none")), converged=True,
                            extras={"record_type": "check", "expected": expected,
                                    "ok": report.passed == (expected == "pass"), **report.to_dict()})


def verify_suite(cfg, seed):
    """Every certificate plus its negative control on one trained toy network."""
    lik = build_likelihood(cfg)
    train, test = build_data(cfg, seed)
    arch = build_arch(cfg, train)
    params = train_seed(cfg, seed, train, arch, lik).params
    rng = np.random.default_rng(seed)
    vc = cfg.verify
    out = []

    small = appendix_net()
    p_small = model.init_params(small, rng)
    out.append((invariance.check_scaling_lemma(small, p_small, train.X, lik, vc.k), "pass"))
    out.append((invariance.check_scaling_lemma(arch, params, train.X, lik, vc.k), "pass"))
    fd_arch = dataclasses.replace(arch, hidden=tuple(dataclasses.replace(arch.hidden[0], width=w)
                                                     for w in vc.fd_hidden))
    p_fd = model.init_params(fd_arch, rng)
    out.append((invariance.check_scaling_lemma(fd_arch, p_fd, train.X[:20], lik, vc.k, jvp="fd"), "pass"))

    for tying, expected in (("per-group", "pass"), ("single", "fail")):
        out.append((invariance.run_stationary_scaling(arch, params, train.X, train.y, lik, vc.k, tying=tying,
                                                      include_biases=cfg.include_biases), expected))
        out.append((invariance.check_posterior_invariance(arch, params, train.X, train.y, lik, test.X,
                                                          vc.posterior_k, tying=tying,
                                                          include_biases=cfg.include_biases), expected))

    out.append((invariance.check_directional_zero(arch, params, test.X), "pass"))
    plain = dataclasses.replace(arch, hidden=tuple(dataclasses.replace(h, layer_norm=False, ln_affine=False)
                                                   for h in arch.hidden))
    out.append((invariance.check_directional_zero(plain, model.init_params(plain, rng), test.X,
                                                  direction="hidden"), "fail"))

    short = dataclasses.replace(cfg.train, seed=seed, epochs=max(1, cfg.train.epochs // 10))
    truncated = train_map(arch, lik, train, None, short).params
    prec = PrecisionSpec.isotropic(truncated.groups, cfg.train.weight_decay * len(train))
    out.append((invariance.check_gradient_agreement(arch, truncated, train, lik, prec), "pass"))
    if arch.fully_normalised:
        out.append((invariance.check_ray_descent(arch, truncated, train, lik, prec), "pass"))
    return [_check_record(seed, rep, expected) for rep, expected in out]


def verify(cfg):
    records = [r for recs in map_seeds(verify_suite, cfg) for r in recs]
    summary = {"checks": len(records), "all_ok": all(r.extras["ok"] for r in records)}
    log.info("verify: %s", summary)
    return records


def summarise(rows):
    """Mean, std and standard error of test NLL and log-precision per (kind, objective, tying)."""
    groups = {}
    for row in rows:
        if row.get("kind") == "verify":
            key = ("verify", row["objective"], row["tying"])
            groups.setdefault(key, {"ok": []})["ok"].append(bool(row["extras"].get("ok")))
            continue
        key = (row["kind"], row["objective"], row["tying"])
        if row["kind"] == "k-scan":
            key = key + (f"k={row['extras']['k']:g}",)
        if row["kind"] == "early-stop":
            key = key + (f"epoch={row['extras']['epoch']}",)
        g = groups.setdefault(key, {"test_nll": [], "converged": [], "seeds": []})
        if row.get("test_nll") is not None:
            g["test_nll"].append(row["test_nll"])
        g["converged"].append(bool(row.get("converged")))
        g["seeds"].append(row["seed"])
    summary = []
    for key, g in sorted(groups.items()):
        entry = {"key": list(key)}
        if "ok" in g:
            entry["all_ok"] = all(g["ok"])
        else:
            vals = np.asarray(g["test_nll"], dtype=float)
            entry.update(n=len(g["seeds"]), all_converged=all(g["converged"]))
            if vals.size:
                sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
                entry.update(mean_nll=float(np.mean(vals)), std_nll=sd, se_nll=sd / np.sqrt(vals.size))
        summary.append(entry)
    return summary


def report(out_dir):
    rows = io.read_metrics(os.path.join(out_dir, "metrics.ndjson"))
    summary = summarise(rows)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary

