"""Command-line driver for phantom generation, fitting, bandwidth selection,
baselines, and the comparison harness.

Configuration comes from flags, optionally underlaid by a JSON config file
(``--config``); explicit flags win.  Fit progress is logged as one JSON
object per EM iteration on stderr.  All subcommands are deterministic for a
fixed (flags, seed, thread count).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from voxmix import bandwidth as bw
from voxmix import baselines, kem, metrics, phantom
from voxmix.kernel import make_kernel
from voxmix.volume import (
    LabelVolume,
    ParameterField,
    SampleMask,
    Volume3D,
    denormalize,
    load_labels,
    load_volume,
    store_labels,
    store_volume,
    subsample_mask,
)

DEFAULT_CH = 0.28
DEFAULTS = {
    "M": 3,
    "r": 1.0,
    "seed": 0,
    "dims": [64, 64, 64],
    "method": "cv",
    "sigma_mode": "standard",
    "max_iter": 50,
    "tol": 1e-4,
    "train_fraction": 0.8,
    "bandwidth_constant": None,
    "filter_size": None,
    "threads": None,
    "class_index": 2,
}


@dataclass(frozen=True)
class RunConfig:
    """Merged settings for one subcommand invocation."""

    command: str
    values: SimpleNamespace

    def __getattr__(self, name):
        return getattr(self.values, name)


def _log(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), file=sys.stderr)


def _iteration_logger(tag: str):
    def cb(iteration, max_delta, seconds):
        _log({"event": tag, "iter": iteration, "max_delta": max_delta,
              "seconds": round(seconds, 6)})
    return cb


def _apply_threads(n) -> None:
    if n is None:
        return
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    clamped = max(1, min(int(n), limit))
    if clamped != n:
        _log({"event": "threads_clamped", "requested": int(n), "using": clamped})
    numba.set_num_threads(clamped)


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _sigma_mode(cfg) -> str:
    return cfg.sigma_mode.replace("-", "_")


def build_config(argv) -> RunConfig:
    """Parse flags, merge the optional JSON config file, apply defaults."""
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    merged = dict(DEFAULTS)
    if args.config is not None:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(DEFAULTS) - {"input", "out_dir", "truth_dir", "fields_dir"}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key, val in vars(args).items():
        if key in ("config", "command"):
            continue
        if val is not None:
            merged[key] = val
        merged.setdefault(key, None)
    return RunConfig(args.command, SimpleNamespace(**merged))


def _positive_int(text: str) -> int:
    val = int(text)
    if val <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {val}")
    return val


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxmix",
        description="Spatially varying Gaussian mixture fitting for dense 3D volumes",
    )
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", dest="out_dir", help="output directory")
    common.add_argument("--M", dest="M", type=int, help="mixture component count")
    common.add_argument("--r", dest="r", type=float, help="voxel sampling ratio in (0,1]")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("--sigma-mode", dest="sigma_mode",
                        choices=["standard", "paper-literal"],
                        help="spread update numerator form")

    fitlike = argparse.ArgumentParser(add_help=False)
    fitlike.add_argument("--input", help="input volume (.kvol) or phantom directory")
    fitlike.add_argument("--filter-size", dest="filter_size", type=int,
                         help="odd truncated filter size in voxels")
    fitlike.add_argument("--bandwidth-constant", dest="bandwidth_constant", type=float,
                         help="bandwidth constant Ch; h = Ch * N^(-1/7)")
    fitlike.add_argument("--max-iter", dest="max_iter", type=int, help="EM iteration cap")
    fitlike.add_argument("--tol", type=float, help="EM convergence threshold")

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic volume")
    p.add_argument("--dims", type=_positive_int, nargs=3, metavar=("DX", "DY", "DZ"),
                   help="grid dims")

    p = sub.add_parser("fit", parents=[common, fitlike], help="fit the mixture to a volume")
    p.add_argument("--truth-dir", dest="truth_dir",
                   help="phantom directory; adds an accuracy/RMSE report row")

    p = sub.add_parser("bandwidth", parents=[common, fitlike],
                       help="select the bandwidth constant")
    p.add_argument("--method", choices=["cv", "reg"], help="selection method")
    p.add_argument("--train-fraction", dest="train_fraction", type=float,
                   help="train share of the sampled voxels")

    p = sub.add_parser("evaluate", parents=[common, fitlike],
                       help="compare methods on a phantom directory")
    p.add_argument("--train-fraction", dest="train_fraction", type=float,
                   help="train share of the sampled voxels")

    p = sub.add_parser("export-posterior", parents=[common, fitlike],
                       help="write one class posterior as .kvol")
    p.add_argument("--fields-dir", dest="fields_dir",
                   help="directory holding fitted pi/mu/sigma fields")
    p.add_argument("--class-index", dest="class_index", type=int,
                   help="1-based class to export")

    sub.add_parser("baseline", parents=[common, fitlike],
                   help="fit the constant-parameter baselines")
    return parser


# --------------------------------------------------------------------------
# shared loading helpers
# --------------------------------------------------------------------------

def _require(cfg, attr: str):
    val = getattr(cfg, attr, None)
    if val is None:
        raise ValueError(f"--{attr.replace('_', '-')} is required for {cfg.command}")
    return val


def _out_dir(cfg) -> Path:
    out = Path(_require(cfg, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_input_volume(cfg) -> Volume3D:
    path = Path(_require(cfg, "input"))
    if path.is_dir():
        return load_volume(path / "volume.kvol")
    return load_volume(path)


def _load_truth(truth_dir) -> tuple[ParameterField, LabelVolume]:
    d = Path(truth_dir)
    labels = load_labels(d / "labels.kvol")
    dims = labels.dims
    fields = {}
    for name in ("pi", "mu", "sigma"):
        parts = []
        for m in range(1, 256):
            p = d / f"truth_{name}_{m}.json"
            if not p.exists():
                break
            parts.append(load_volume(d / f"truth_{name}_{m}.kvol").data)
        if not parts:
            raise FileNotFoundError(f"no truth_{name}_*.kvol in {d}")
        fields[name] = np.stack(parts)
    theta = ParameterField(dims, fields["pi"].shape[0], fields["pi"], fields["mu"],
                           fields["sigma"])
    return theta, labels


def _store_theta(theta: ParameterField, out: Path, prefix: str) -> list[str]:
    names = []
    for name in ("pi", "mu", "sigma"):
        arr = getattr(theta, name)
        for m in range(theta.n_components):
            fname = f"{prefix}{name}_{m + 1}.kvol"
            store_volume(Volume3D(theta.dims, arr[m]), out / fname)
            names.append(fname)
    return names


def _bandwidth_for(cfg, n_samples: int, dims) -> tuple[float, int, float]:
    ch = cfg.bandwidth_constant if cfg.bandwidth_constant is not None else DEFAULT_CH
    h = ch * n_samples ** (-1.0 / 7.0)
    s = cfg.filter_size if cfg.filter_size is not None else bw.filter_size_for(h, dims)
    if s % 2 == 0 or s < 1:
        raise ValueError(f"filter size must be odd and positive, got {s}")
    return h, int(s), ch


def _fit_config(cfg, h: float, s: int, dims) -> kem.FitConfig:
    return kem.FitConfig(
        M=cfg.M,
        kernel=make_kernel(h, s, dims),
        max_iter=cfg.max_iter,
        tol=cfg.tol,
        sigma_numerator_mode=_sigma_mode(cfg),
        seed=cfg.seed,
    )


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(cfg) -> int:
    out = _out_dir(cfg)
    spec = phantom.PhantomSpec(dims=tuple(cfg.dims), seed=cfg.seed)
    data = phantom.generate_phantom(spec)
    store_volume(data.volume, out / "volume.kvol")
    store_labels(data.labels, out / "labels.kvol")
    store_labels(data.geometry, out / "geometry.kvol")
    field_files = _store_theta(data.theta, out, "truth_")
    manifest = {
        "dims": list(spec.dims),
        "M": spec.n_components,
        "seed": spec.seed,
        "base_mu": list(spec.base_mu),
        "base_sigma": list(spec.base_sigma),
        "files": ["volume.kvol", "labels.kvol", "geometry.kvol"] + field_files,
    }
    _write_json(out / "phantom.json", manifest)
    _log({"event": "phantom_written", "out_dir": str(out)})
    return 0


def cmd_fit(cfg) -> int:
    out = _out_dir(cfg)
    v = _load_input_volume(cfg)
    mask = subsample_mask(v.dims, cfg.r, cfg.seed)
    h, s, ch = _bandwidth_for(cfg, mask.n_included, v.dims)
    fit_cfg = _fit_config(cfg, h, s, v.dims)
    t0 = time.perf_counter()
    result = kem.kem_fit(v, mask, fit_cfg, iteration_callback=_iteration_logger("em_iteration"))
    seconds = time.perf_counter() - t0
    result.theta.validate(sigma_floor=0.0, tol=1e-8)
    _store_theta(result.theta, out, "")
    resp_all = kem.e_step(v, SampleMask.full(v.dims), result.theta)
    store_labels(kem.hard_labels(resp_all), out / "labels.kvol")
    for c in range(1, cfg.M + 1):
        store_volume(kem.posterior_volume(v, result.theta, c), out / f"posterior_{c}.kvol")
    _write_json(out / "fit.json", {
        "M": cfg.M, "r": cfg.r, "seed": cfg.seed, "Ch": ch, "h": h, "s": s,
        "iterations": result.iterations, "final_change": result.final_change,
        "converged": result.converged, "carried_voxels": result.carried_voxels,
        "seconds": round(seconds, 3), "sigma_mode": _sigma_mode(cfg),
    })
    if getattr(cfg, "truth_dir", None):
        truth_theta, truth_labels = _load_truth(cfg.truth_dir)
        test_mask = SampleMask.full(v.dims)
        report = metrics.EvalReport(
            method="kem",
            r=cfg.r,
            Ch=ch,
            rmse_pi=metrics.rmse_field(result.theta, truth_theta, "pi"),
            rmse_mu=metrics.rmse_field(result.theta, truth_theta, "mu"),
            rmse_sigma=metrics.rmse_field(result.theta, truth_theta, "sigma"),
            spe=metrics.prediction_error(v, kem.predict_response(result.theta), test_mask),
            accuracy=metrics.accuracy(kem.hard_labels(resp_all), truth_labels, test_mask,
                                      result.theta, truth_theta),
            seconds=seconds,
        )
        metrics.append_report(out / "results.csv", report)
    _log({"event": "fit_written", "out_dir": str(out), "iterations": result.iterations})
    return 0


def cmd_bandwidth(cfg) -> int:
    out = _out_dir(cfg)
    v = _load_input_volume(cfg)
    sample = subsample_mask(v.dims, cfg.r, cfg.seed)
    train, test = _split_sample(v.dims, sample, cfg.train_fraction, cfg.seed)
    n_train = train.n_included
    plan = (bw.default_cv_schedule(v.dims, n_train) if cfg.method == "cv"
            else bw.default_reg_schedule(v.dims, n_train))
    t0 = time.perf_counter()
    sel = bw.select_bandwidth(
        v, train, test, plan,
        M=cfg.M, max_iter=cfg.max_iter, tol=cfg.tol,
        sigma_numerator_mode=_sigma_mode(cfg), seed=cfg.seed,
    )
    seconds = time.perf_counter() - t0
    payload = sel.to_dict()
    payload["seconds"] = round(seconds, 3)
    payload["N"] = n_train
    _write_json(out / "bandwidth.json", payload)
    _log({"event": "bandwidth_selected", "method": sel.method, "Ch": sel.Ch,
          "seconds": round(seconds, 3)})
    return 0


def _split_sample(dims, sample: SampleMask, train_fraction: float, seed: int):
    """80/20-style partition of the sampled voxels into train and test masks."""
    flat = np.flatnonzero(sample.included.ravel())
    perm = np.random.default_rng(seed + 1).permutation(flat.size)
    n_train = int(round(train_fraction * flat.size))
    total = sample.included.size
    train_flat = np.zeros(total, dtype=bool)
    train_flat[flat[perm[:n_train]]] = True
    test_flat = np.zeros(total, dtype=bool)
    test_flat[flat[perm[n_train:]]] = True
    shape = sample.included.shape
    train = SampleMask(dims, train_flat.reshape(shape), n_train / total, "train")
    test = SampleMask(dims, test_flat.reshape(shape), (flat.size - n_train) / total, "test")
    return train, test


def _evaluate_kem(v, sample, train, test, plan, cfg, truth_theta, truth_labels, tag):
    t0 = time.perf_counter()
    sel = bw.select_bandwidth(
        v, train, test, plan,
        M=cfg.M, max_iter=cfg.max_iter, tol=cfg.tol,
        sigma_numerator_mode=_sigma_mode(cfg), seed=cfg.seed,
    )
    fit_cfg = _fit_config(cfg, sel.h, sel.s, v.dims)
    result = kem.kem_fit(v, sample, fit_cfg)
    seconds = time.perf_counter() - t0
    resp_all = kem.e_step(v, SampleMask.full(v.dims), result.theta)
    report = metrics.EvalReport(
        method=tag,
        r=cfg.r,
        Ch=sel.Ch,
        rmse_pi=metrics.rmse_field(result.theta, truth_theta, "pi"),
        rmse_mu=metrics.rmse_field(result.theta, truth_theta, "mu"),
        rmse_sigma=metrics.rmse_field(result.theta, truth_theta, "sigma"),
        spe=metrics.prediction_error(v, kem.predict_response(result.theta), test),
        accuracy=metrics.accuracy(kem.hard_labels(resp_all), truth_labels, test,
                                  result.theta, truth_theta),
        seconds=seconds,
    )
    return report, sel


def _evaluate_baseline(v, sample, test, cfg, truth_theta, truth_labels, tag):
    vals = v.data[sample.included]
    t0 = time.perf_counter()
    if tag == "kmeans":
        theta = baselines.kmeans_theta(vals, cfg.M, seed=cfg.seed)
        labels = baselines.nearest_centroid_labels(theta.mu, v)
    else:
        theta, _ = baselines.gmm_fit_global(vals, cfg.M, seed=cfg.seed)
        labels = baselines.baseline_labels(theta, v)
    seconds = time.perf_counter() - t0
    field = baselines.baseline_field(theta, v.dims)
    return metrics.EvalReport(
        method=tag,
        r=cfg.r,
        Ch=None,
        rmse_pi=metrics.rmse_field(field, truth_theta, "pi"),
        rmse_mu=metrics.rmse_field(field, truth_theta, "mu"),
        rmse_sigma=metrics.rmse_field(field, truth_theta, "sigma"),
        spe=metrics.prediction_error(v, baselines.baseline_predict(theta), test),
        accuracy=metrics.accuracy(labels, truth_labels, test, field, truth_theta),
        seconds=seconds,
    )


def cmd_evaluate(cfg) -> int:
    out = _out_dir(cfg)
    in_dir = Path(_require(cfg, "input"))
    if not in_dir.is_dir():
        raise ValueError(f"evaluate needs a phantom directory, got {in_dir}")
    v = load_volume(in_dir / "volume.kvol")
    truth_theta, truth_labels = _load_truth(in_dir)
    sample = subsample_mask(v.dims, cfg.r, cfg.seed)
    train, test = _split_sample(v.dims, sample, cfg.train_fraction, cfg.seed)
    n_train = train.n_included
    csv_path = out / "results.csv"
    for tag, plan in (
        ("kem-cv", bw.default_cv_schedule(v.dims, n_train)),
        ("kem-reg", bw.default_reg_schedule(v.dims, n_train)),
    ):
        report, sel = _evaluate_kem(v, sample, train, test, plan, cfg, truth_theta,
                                    truth_labels, tag)
        metrics.append_report(csv_path, report)
        _log({"event": "evaluated", "method": tag, "Ch": sel.Ch,
              "accuracy": report.accuracy, "seconds": round(report.seconds, 3)})
    for tag in ("kmeans", "gmm"):
        report = _evaluate_baseline(v, sample, test, cfg, truth_theta, truth_labels, tag)
        metrics.append_report(csv_path, report)
        _log({"event": "evaluated", "method": tag, "accuracy": report.accuracy,
              "seconds": round(report.seconds, 3)})
    return 0


def cmd_export_posterior(cfg) -> int:
    out = _out_dir(cfg)
    v = _load_input_volume(cfg)
    fields_dir = Path(_require(cfg, "fields_dir"))
    theta = _load_fitted_theta(fields_dir, v.dims)
    c = cfg.class_index
    post = kem.posterior_volume(v, theta, c)
    if v.value_range is not None:
        post = denormalize(post, v.value_range)
    store_volume(post, out / f"posterior_{c}.kvol")
    _log({"event": "posterior_written", "class_index": c, "out_dir": str(out)})
    return 0


def _load_fitted_theta(fields_dir: Path, dims) -> ParameterField:
    fields = {}
    for name in ("pi", "mu", "sigma"):
        parts = []
        for m in range(1, 256):
            p = fields_dir / f"{name}_{m}.json"
            if not p.exists():
                break
            parts.append(load_volume(fields_dir / f"{name}_{m}.kvol").data)
        if not parts:
            raise FileNotFoundError(f"no {name}_*.kvol fields in {fields_dir}")
        fields[name] = np.stack(parts)
    return ParameterField(dims, fields["pi"].shape[0], fields["pi"], fields["mu"],
                          fields["sigma"])


def cmd_baseline(cfg) -> int:
    out = _out_dir(cfg)
    v = _load_input_volume(cfg)
    sample = subsample_mask(v.dims, cfg.r, cfg.seed)
    vals = v.data[sample.included]
    km = baselines.kmeans_theta(vals, cfg.M, seed=cfg.seed)
    gm, trace = baselines.gmm_fit_global(vals, cfg.M, seed=cfg.seed)
    _write_json(out / "kmeans.json", km.to_dict())
    _write_json(out / "gmm.json", {**gm.to_dict(), "loglik_iterations": len(trace)})
    store_labels(baselines.nearest_centroid_labels(km.mu, v), out / "kmeans_labels.kvol")
    store_labels(baselines.baseline_labels(gm, v), out / "gmm_labels.kvol")
    _log({"event": "baselines_written", "out_dir": str(out)})
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "bandwidth": cmd_bandwidth,
    "evaluate": cmd_evaluate,
    "export-posterior": cmd_export_posterior,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    cfg = build_config(sys.argv[1:] if argv is None else argv)
    _apply_threads(cfg.threads)
    try:
        return COMMANDS[cfg.command](cfg)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
