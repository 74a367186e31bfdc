"""Command-line front end for the whole experiment loop.

Subcommands: phantom synthesis, Rician corruption, direction subsampling,
tensor fitting, network training, inference, map evaluation, the
three-mode comparison, and slice rendering to PGM.

Exit codes: 0 on success, 1 on validation problems (bad flags, missing or
malformed files, incompatible inputs), 2 on runtime failures. Errors are
reported as a single `ERROR[<code>]:` line on stderr.

Every command emits a run manifest recording the resolved configuration,
seeds, SHA-256 hashes of inputs and outputs, and the wall-clock duration.
Manifests carry timing, so they are the one artifact class excluded from
byte-identical reruns; data artifacts are written atomically and reproduce
exactly under `--threads 1`.

This module stays import-light on purpose: thread pinning has to happen
before the numeric libraries load, so heavy imports live inside the
command handlers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

THREADS_ENV = "SVDTI_THREADS"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

_AXES = {"x": 0, "y": 1, "z": 2}


class CliError(Exception):
    """Error with a machine-parsable code and an exit status."""

    def __init__(self, message: str, code: str = "validation", exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _apply_threads(argv) -> int | None:
    """Pin BLAS/OpenMP thread counts before numpy is imported.

    `--threads N` wins over the SVDTI_THREADS environment variable; the
    flag sets the knobs unconditionally, the variable only fills in ones
    the caller left unset.
    """
    explicit = None
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            explicit = argv[i + 1]
        elif token.startswith("--threads="):
            explicit = token.split("=", 1)[1]
    source = explicit if explicit is not None else os.environ.get(THREADS_ENV)
    if source is None:
        return None
    try:
        count = int(source)
    except ValueError:
        return None  # argparse reports the bad flag value later
    if count < 1:
        return None
    for var in _THREAD_VARS:
        if explicit is not None:
            os.environ[var] = str(count)
        else:
            os.environ.setdefault(var, str(count))
    return count


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this front end reserves 2 for
    # runtime failures, so usage problems are remapped to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR[usage]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or exc.__class__.__name__


def _jsonify(obj):
    """Make an object JSON-safe: tuples to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float):
        if obj != obj or obj in (float("inf"), float("-inf")):
            return None
        return obj
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonify(obj), indent=2, sort_keys=True) + "\n"


def _write_json(path: str, obj) -> None:
    from .core import atomic_write_text

    atomic_write_text(path, _dump_json(obj))


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _emit_manifest(args, command: str, *, config: dict, seeds: dict,
                   inputs, outputs, started: float, threads,
                   default_base: str) -> str:
    from . import __version__

    path = args.manifest or default_base + ".manifest.json"
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {os.fspath(p): _sha256(p) for p in inputs},
        "outputs": {os.fspath(p): _sha256(p) for p in outputs},
        "duration_seconds": time.perf_counter() - started,
        "threads": threads,
    }
    _write_json(path, manifest)
    return path


def _format_table(headers, rows) -> str:
    """Aligned GitHub-style markdown table."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[c]) for row in cells) for c in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |")
        if i == 0:
            lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"


# -- configuration ----------------------------------------------------------

_DATA_DEFAULTS = {
    "dims": [24, 24, 24],
    "preset": "mixed",
    "phantom_seed": 0,
    "n_dirs": 90,
    "bval": 1000.0,
    "n_b0": 1,
    "k": 6,
    "subsample_restarts": 20,
    "subsample_seed": 0,
    "noise_sigma": 0.025,
    "noise_seed": 0,
    "split": [0.6, 0.2, 0.2],
    "split_seed": 0,
}

_ABLATE_DEFAULTS = {
    "modes": ["plain", "svd_reg_fixed", "svd_reg_nala"],
    "seeds": [0, 1, 2],
}

_CONFIG_SECTIONS = ("data", "train", "ablate")


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", code="io")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except ValueError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - set(_CONFIG_SECTIONS))
    if unknown:
        raise CliError(
            f"unknown config sections {unknown}; expected subset of {list(_CONFIG_SECTIONS)}"
        )
    return raw


def _apply_overrides(raw: dict, assignments) -> None:
    for item in assignments:
        if "=" not in item:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        if len(keys) < 2 or not all(keys):
            raise CliError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(text)
        except ValueError:
            value = text
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise CliError(f"--set path {dotted!r} does not address a table")
        node[keys[-1]] = value


def _merge_section(raw: dict, name: str, defaults: dict) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be an object")
    unknown = sorted(set(section) - set(defaults))
    if unknown:
        raise CliError(f"unknown keys in config section {name!r}: {unknown}")
    merged = dict(defaults)
    merged.update(section)
    return merged


def _resolve_train_config(raw: dict, mode_override=None):
    from .train import TrainConfig

    section = raw.get("train", {})
    if not isinstance(section, dict):
        raise CliError("config section 'train' must be an object")
    if mode_override is not None:
        section = {**section, "mode": mode_override}
    return TrainConfig.from_dict(section)


class _Bundle:
    """One phantom experiment, shared across modes of a comparison run."""

    def __init__(self, data_cfg: dict, patch_size: int, stride: int):
        from .core import DwiVolume
        from .fit import derive_metrics, fit_tensor_ols
        from .phantom import NoiseSpec, add_rician_noise, make_phantom, simulate_dwi
        from .qspace import apply_subsampling, fibonacci_scheme, select_uniform
        from .train import prepare_dataset, split_blocks

        self.config = dict(data_cfg)
        self.field = make_phantom(tuple(data_cfg["dims"]), data_cfg["preset"],
                                  data_cfg["phantom_seed"])
        self.scheme = fibonacci_scheme(int(data_cfg["n_dirs"]),
                                       bval=float(data_cfg["bval"]),
                                       n_b0=int(data_cfg["n_b0"]))
        k = data_cfg["k"]
        self.subsampling = None
        if k is not None and int(k) < self.scheme.dwi_indices.size:
            self.subsampling = select_uniform(
                self.scheme, int(k),
                restarts=int(data_cfg["subsample_restarts"]),
                seed=int(data_cfg["subsample_seed"]),
            )
        sigma = float(data_cfg["noise_sigma"])
        self.noise = NoiseSpec(sigma=sigma, seed=int(data_cfg["noise_seed"])) if sigma > 0 else None

        self.sets = prepare_dataset(
            self.field, self.scheme, self.subsampling, self.noise,
            patch_size=patch_size, stride=stride,
            split=tuple(data_cfg["split"]), split_seed=int(data_cfg["split_seed"]),
            n_b0=int(data_cfg["n_b0"]),
        )

        full = simulate_dwi(self.field, self.scheme)
        self.gt_maps = derive_metrics(fit_tensor_ols(full))
        volume = full
        if self.subsampling is not None:
            volume = apply_subsampling(volume, self.subsampling,
                                       n_b0=int(data_cfg["n_b0"]))
        if self.noise is not None:
            volume = add_rician_noise(volume, self.noise)
        self.volume = DwiVolume(data=volume.data, mask=self.gt_maps.mask,
                                scheme=volume.scheme)
        self.blocks = split_blocks(self.volume.dims[2],
                                   tuple(data_cfg["split"]),
                                   int(data_cfg["split_seed"]))

    def test_mask(self):
        import numpy as np

        z0, z1 = self.blocks[2]
        mask = np.zeros_like(self.gt_maps.mask)
        mask[:, :, z0:z1] = True
        mask &= self.gt_maps.mask
        if not mask.any():
            raise CliError("test split contains no masked-in voxels")
        return mask


def _history_lines(history) -> str:
    return "".join(json.dumps(_jsonify(entry), sort_keys=True) + "\n"
                   for entry in history)


# -- commands ---------------------------------------------------------------

def cmd_phantom(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_scheme, write_scheme, write_volume
    from .phantom import make_phantom, simulate_dwi, write_tensor_field
    from .qspace import fibonacci_scheme

    inputs = []
    if args.scheme:
        scheme = read_scheme(args.scheme)
        base = args.scheme
        for suffix in (".bval", ".bvec"):
            if base.endswith(suffix):
                base = base[: -len(suffix)]
        inputs = [base + ".bval", base + ".bvec"]
    else:
        scheme = fibonacci_scheme(args.n_dirs, bval=args.bval, n_b0=args.n_b0)

    field = make_phantom(tuple(args.dims), args.preset, args.seed)
    volume = simulate_dwi(field, scheme)

    write_volume(volume, args.out)
    write_scheme(scheme, args.out)
    outputs = list(_vol_paths(args.out)) + [args.out + ".bval", args.out + ".bvec"]
    if args.field_out:
        write_tensor_field(field, args.field_out)
        outputs += list(_vol_paths(args.field_out))

    config = {
        "dims": list(args.dims), "preset": args.preset, "seed": args.seed,
        "scheme": args.scheme, "n_dirs": args.n_dirs, "bval": args.bval,
        "n_b0": args.n_b0, "out": args.out, "field_out": args.field_out,
    }
    _emit_manifest(args, "phantom", config=config, seeds={"phantom_seed": args.seed},
                   inputs=inputs, outputs=outputs, started=started,
                   threads=threads, default_base=args.out)
    return EXIT_OK


def cmd_noise(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_volume, write_volume
    from .phantom import NoiseSpec, add_rician_noise

    if args.sigma < 0:
        raise CliError(f"sigma must be >= 0, got {args.sigma}")
    volume = read_volume(args.inp)
    noisy = add_rician_noise(volume, NoiseSpec(sigma=args.sigma, seed=args.seed))
    write_volume(noisy, args.out)

    config = {"in": args.inp, "sigma": args.sigma, "seed": args.seed, "out": args.out}
    _emit_manifest(args, "noise", config=config, seeds={"noise_seed": args.seed},
                   inputs=list(_vol_paths(args.inp)),
                   outputs=list(_vol_paths(args.out)), started=started,
                   threads=threads, default_base=args.out)
    return EXIT_OK


def cmd_subsample(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_volume, write_scheme, write_volume
    from .qspace import apply_subsampling, select_uniform

    volume = read_volume(args.inp)
    result = select_uniform(volume.scheme, args.k, restarts=args.restarts,
                            seed=args.seed)
    reduced = apply_subsampling(volume, result, n_b0=args.n_b0)
    write_volume(reduced, args.out)
    write_scheme(reduced.scheme, args.out)

    indices_path = args.indices_out or args.out + ".indices.json"
    _write_json(indices_path, {
        "selected_indices": list(result.selected_indices),
        "energy": result.energy,
        "k": args.k,
        "restarts": args.restarts,
        "seed": args.seed,
        "kept_b0": args.n_b0,
    })

    outputs = list(_vol_paths(args.out))
    outputs += [args.out + ".bval", args.out + ".bvec", indices_path]
    config = {"in": args.inp, "k": args.k, "restarts": args.restarts,
              "seed": args.seed, "n_b0": args.n_b0, "out": args.out}
    _emit_manifest(args, "subsample", config=config,
                   seeds={"subsample_seed": args.seed},
                   inputs=list(_vol_paths(args.inp)), outputs=outputs,
                   started=started, threads=threads, default_base=args.out)
    return EXIT_OK


def cmd_fit(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_volume, write_metric_maps
    from .fit import derive_metrics, fit_tensor_ols
    from .phantom import write_tensor_field

    volume = read_volume(args.inp)
    field, report = fit_tensor_ols(volume, with_report=True)
    maps = derive_metrics(field)

    maps_base = args.out + ".metrics"
    field_base = args.out + ".tensors"
    report_path = args.out + ".fit-report.json"
    write_metric_maps(maps, maps_base)
    write_tensor_field(field, field_base)
    _write_json(report_path, report.to_dict())

    outputs = list(_vol_paths(maps_base)) + list(_vol_paths(field_base)) + [report_path]
    config = {"in": args.inp, "out": args.out}
    _emit_manifest(args, "fit", config=config, seeds={},
                   inputs=list(_vol_paths(args.inp)), outputs=outputs,
                   started=started, threads=threads, default_base=args.out)
    return EXIT_OK


def _train_seed_dict(data_cfg: dict, tcfg) -> dict:
    return {
        "phantom_seed": data_cfg["phantom_seed"],
        "noise_seed": data_cfg["noise_seed"],
        "subsample_seed": data_cfg["subsample_seed"],
        "split_seed": data_cfg["split_seed"],
        "init_seed": tcfg.init_seed,
        "shuffle_seed": tcfg.shuffle_seed,
    }


def _checkpoint_extra(tcfg) -> dict:
    return {
        "normalization": tcfg.normalization.to_dict(),
        "patch_size": tcfg.patch_size,
        "mode": tcfg.mode,
    }


def cmd_train(args, threads) -> int:
    started = time.perf_counter()
    from .core import atomic_write_text
    from .net import _net_paths, save_checkpoint
    from .train import train

    raw = _load_config(args.config)
    _apply_overrides(raw, args.set or [])
    data_cfg = _merge_section(raw, "data", _DATA_DEFAULTS)
    tcfg = _resolve_train_config(raw, mode_override=args.mode)

    bundle = _Bundle(data_cfg, tcfg.patch_size, tcfg.stride)
    result = train(tcfg, bundle.sets)

    history_path = args.out + ".history.jsonl"
    atomic_write_text(history_path, _history_lines(result.history))
    save_checkpoint(result.params, args.out, step=len(result.history),
                    seed=tcfg.init_seed, extra=_checkpoint_extra(tcfg))

    outputs = list(_net_paths(args.out)) + [history_path]
    config = {"data": data_cfg, "train": tcfg.to_dict(), "out": args.out}
    _emit_manifest(args, "train", config=config,
                   seeds=_train_seed_dict(data_cfg, tcfg),
                   inputs=[args.config], outputs=outputs, started=started,
                   threads=threads, default_base=args.out)
    if result.aborted:
        raise CliError("training diverged; last finite checkpoint retained",
                       code="runtime", exit_code=EXIT_RUNTIME)
    return EXIT_OK


def cmd_infer(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_volume, write_metric_maps
    from .net import _net_paths, load_checkpoint
    from .train import NormalizationSpec, infer

    params, header = load_checkpoint(args.checkpoint)
    volume = read_volume(args.inp)
    norm = NormalizationSpec(**header["normalization"]) if "normalization" in header \
        else NormalizationSpec()
    maps = infer(params, volume, normalization=norm, stride=args.stride)
    write_metric_maps(maps, args.out)

    config = {"checkpoint": args.checkpoint, "in": args.inp,
              "stride": args.stride, "out": args.out}
    _emit_manifest(args, "infer", config=config, seeds={},
                   inputs=list(_net_paths(args.checkpoint)) + list(_vol_paths(args.inp)),
                   outputs=list(_vol_paths(args.out)), started=started,
                   threads=threads, default_base=args.out)
    return EXIT_OK


def _eval_rows(report) -> list:
    rows = []
    for name in ("fa", "md", "ad", "all"):
        psnr = report.psnr_values[name]
        rows.append([
            name.upper() if name != "all" else "All",
            f"{report.mse_values[name]:.6e}",
            f"{report.ssim_values[name]:.6f}",
            "inf" if psnr != psnr or psnr == float("inf") else f"{psnr:.4f}",
        ])
    return rows


def cmd_eval(args, threads) -> int:
    started = time.perf_counter()
    from .core import _vol_paths, read_metric_maps
    from .metrics import evaluate
    from .train import NormalizationSpec, normalize_maps

    pred = read_metric_maps(args.pred)
    gt = read_metric_maps(args.gt)
    mask = pred.mask & gt.mask
    norm = NormalizationSpec(fa_scale=args.fa_scale, md_scale=args.md_scale,
                             ad_scale=args.ad_scale)
    report = evaluate(normalize_maps(pred, norm), normalize_maps(gt, norm), mask)
    _write_json(args.out, report.to_dict())

    outputs = [args.out]
    if args.table:
        from .core import atomic_write_text

        atomic_write_text(args.table, _format_table(
            ["Metric", "MSE", "SSIM", "PSNR"], _eval_rows(report)))
        outputs.append(args.table)

    config = {"pred": args.pred, "gt": args.gt, "out": args.out,
              "table": args.table, "fa_scale": args.fa_scale,
              "md_scale": args.md_scale, "ad_scale": args.ad_scale}
    _emit_manifest(args, "eval", config=config, seeds={},
                   inputs=list(_vol_paths(args.pred)) + list(_vol_paths(args.gt)),
                   outputs=outputs, started=started, threads=threads,
                   default_base=args.out)
    return EXIT_OK


_MODE_LABELS = {
    "plain": ("no", "no"),
    "svd_reg_fixed": ("yes", "no"),
    "svd_reg_nala": ("yes", "yes"),
}


def _mode_lambda_label(mode: str, tcfg) -> str:
    if mode == "plain":
        return "0"
    if mode == "svd_reg_fixed":
        return f"{tcfg.fixed_lambda:g}"
    return f"adaptive (from {tcfg.lambda0:g})"


def cmd_ablate(args, threads) -> int:
    started = time.perf_counter()
    from .core import atomic_write_text
    from .metrics import aggregate_reports, evaluate
    from .train import MODES, TrainConfig, infer, normalize_maps, train

    raw = _load_config(args.config)
    _apply_overrides(raw, args.set or [])
    data_cfg = _merge_section(raw, "data", _DATA_DEFAULTS)
    ablate_cfg = _merge_section(raw, "ablate", _ABLATE_DEFAULTS)
    if args.modes:
        ablate_cfg["modes"] = list(args.modes)
    if args.seeds is not None:
        ablate_cfg["seeds"] = list(args.seeds)
    modes = list(ablate_cfg["modes"])
    seeds = [int(s) for s in ablate_cfg["seeds"]]
    for mode in modes:
        if mode not in MODES:
            raise CliError(f"unknown mode {mode!r}; choose from {list(MODES)}")
    if not seeds:
        raise CliError("ablate needs at least one seed")
    base_tcfg = _resolve_train_config(raw)

    outputs = []
    per_mode = {mode: {"per_seed": {}, "failures": {}} for mode in modes}
    norm = base_tcfg.normalization
    for seed in seeds:
        seed_data = dict(data_cfg)
        seed_data["phantom_seed"] = int(data_cfg["phantom_seed"]) + seed
        seed_data["noise_seed"] = int(data_cfg["noise_seed"]) + seed
        bundle = _Bundle(seed_data, base_tcfg.patch_size, base_tcfg.stride)
        test_mask = bundle.test_mask()
        gt_norm = normalize_maps(bundle.gt_maps, norm)
        for mode in modes:
            tcfg = TrainConfig.from_dict({
                **base_tcfg.to_dict(),
                "mode": mode,
                "init_seed": base_tcfg.init_seed + seed,
                "shuffle_seed": base_tcfg.shuffle_seed + seed,
            })
            history_path = f"{args.out}.{mode}.seed{seed}.history.jsonl"
            try:
                result = train(tcfg, bundle.sets)
                atomic_write_text(history_path, _history_lines(result.history))
                outputs.append(history_path)
                if result.aborted:
                    raise RuntimeError("training diverged")
                maps = infer(result.params, bundle.volume, normalization=norm)
                report = evaluate(normalize_maps(maps, norm), gt_norm, test_mask)
                per_mode[mode]["per_seed"][str(seed)] = report
            except Exception as exc:  # noqa: BLE001 - isolate per-mode failures
                per_mode[mode]["failures"][str(seed)] = _one_line(exc)

    table_rows = []
    report_out = {"seeds": seeds, "modes": {}}
    any_failed = False
    for mode in modes:
        entry = per_mode[mode]
        reports = list(entry["per_seed"].values())
        svd_reg, nala = _MODE_LABELS[mode]
        row = [mode, svd_reg, nala, _mode_lambda_label(mode, base_tcfg)]
        if entry["failures"]:
            any_failed = True
        if reports:
            agg = aggregate_reports(reports)
            for metric in ("mse", "ssim", "psnr"):
                stat = agg[metric]["all"]
                fmt = ".3e" if metric == "mse" else ".4f"
                row.append(f"{stat['mean']:{fmt}} ± {stat['std']:{fmt}}")
            if entry["failures"]:
                row[0] = f"{mode} (partial)"
        else:
            agg = None
            message = "; ".join(
                f"seed {s}: {m}" for s, m in sorted(entry["failures"].items()))
            row += [f"failed ({message})", "-", "-"]
        table_rows.append(row)
        report_out["modes"][mode] = {
            "per_seed": {s: r.to_dict() for s, r in entry["per_seed"].items()},
            "aggregate": agg,
            "failures": entry["failures"],
            "lambda": _mode_lambda_label(mode, base_tcfg),
        }

    table = _format_table(
        ["Mode", "SVD-Reg", "NALA", "lambda", "MSE", "SSIM", "PSNR"], table_rows)
    table_path = args.out + ".table.md"
    report_path = args.out + ".report.json"
    atomic_write_text(table_path, table)
    _write_json(report_path, report_out)
    outputs += [table_path, report_path]
    sys.stdout.write(table)

    config = {"data": data_cfg, "train": base_tcfg.to_dict(),
              "ablate": {"modes": modes, "seeds": seeds}, "out": args.out}
    _emit_manifest(args, "ablate", config=config,
                   seeds=_train_seed_dict(data_cfg, base_tcfg),
                   inputs=[args.config], outputs=outputs, started=started,
                   threads=threads, default_base=args.out)
    if any_failed:
        raise CliError("one or more ablation runs failed; table is partial",
                       code="runtime", exit_code=EXIT_RUNTIME)
    return EXIT_OK


def cmd_render(args, threads) -> int:
    started = time.perf_counter()
    import numpy as np

    from .core import _vol_paths, atomic_write_bytes, read_metric_maps

    maps = read_metric_maps(args.inp)
    plane_axis = _AXES[args.axis]
    extent = maps.dims[plane_axis]
    if not 0 <= args.slice < extent:
        raise CliError(
            f"slice index {args.slice} is out of bounds for axis "
            f"{args.axis!r} with extent {extent}"
        )
    img = np.take(getattr(maps, args.metric), args.slice, axis=plane_axis)
    inputs = list(_vol_paths(args.inp))
    if args.reference:
        ref = read_metric_maps(args.reference)
        if ref.dims != maps.dims:
            raise CliError(
                f"reference dims {ref.dims} do not match input dims {maps.dims}")
        ref_img = np.take(getattr(ref, args.metric), args.slice, axis=plane_axis)
        img = np.abs(img - ref_img)
        inputs += list(_vol_paths(args.reference))

    data_range = args.data_range if args.data_range is not None else float(img.max())
    if data_range <= 0:
        data_range = 1.0
    scaled = np.clip(img, 0.0, data_range) / data_range
    pixels = np.rint(scaled * 65535.0).astype(">u2")
    # PGM raster is row-major top to bottom; transpose so the first map
    # axis runs horizontally.
    raster = pixels.T
    header = f"P5\n{img.shape[0]} {img.shape[1]}\n65535\n".encode("ascii")
    atomic_write_bytes(args.out, header + raster.tobytes())

    config = {"in": args.inp, "metric": args.metric, "axis": args.axis,
              "slice": args.slice, "reference": args.reference,
              "data_range": data_range, "out": args.out}
    _emit_manifest(args, "render", config=config, seeds={}, inputs=inputs,
                   outputs=[args.out], started=started, threads=threads,
                   default_base=args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="svdti",
        description="Synthetic DTI phantoms, six-direction metric-map learning, "
                    "and the tooling around them.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, metavar="N",
                        help=f"BLAS/OpenMP thread count (default: ${THREADS_ENV}); "
                             "1 gives reproducible runs")
    common.add_argument("--manifest", metavar="PATH",
                        help="run-manifest path (default: <out>.manifest.json)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", parents=[common],
                       help="synthesize a phantom and its noiseless measurements")
    p.add_argument("--dims", type=int, nargs=3, default=[24, 24, 24],
                   metavar=("W", "H", "S"))
    p.add_argument("--preset", default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheme", metavar="BASE",
                   help="read gradients from BASE.bval/BASE.bvec instead of generating")
    p.add_argument("--n-dirs", type=int, default=90)
    p.add_argument("--bval", type=float, default=1000.0)
    p.add_argument("--n-b0", type=int, default=1)
    p.add_argument("--field-out", metavar="BASE",
                   help="also write the ground-truth tensor field")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("noise", parents=[common],
                       help="apply magnitude (Rician) noise to a volume")
    p.add_argument("--in", dest="inp", required=True, metavar="BASE")
    p.add_argument("--sigma", type=float, required=True,
                   help="noise level relative to the mean masked-in b0 signal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("subsample", parents=[common],
                       help="pick k evenly spread directions and restrict a volume")
    p.add_argument("--in", dest="inp", required=True, metavar="BASE")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-b0", type=int, default=1)
    p.add_argument("--indices-out", metavar="PATH")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("fit", parents=[common],
                       help="least-squares tensor fit and FA/MD/AD maps")
    p.add_argument("--in", dest="inp", required=True, metavar="BASE")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", parents=[common],
                       help="train a patch network from a JSON experiment config")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--mode", choices=["plain", "svd_reg_fixed", "svd_reg_nala"],
                   help="override the configured training mode")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config key (JSON-parsed value); repeatable")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="predict metric maps from a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="BASE")
    p.add_argument("--in", dest="inp", required=True, metavar="BASE")
    p.add_argument("--stride", type=int, default=None,
                   help="tile stride (default: the patch size)")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="score predicted maps against reference maps")
    p.add_argument("--pred", required=True, metavar="BASE")
    p.add_argument("--gt", required=True, metavar="BASE")
    p.add_argument("--fa-scale", type=float, default=1.0)
    p.add_argument("--md-scale", type=float, default=3.0e-3)
    p.add_argument("--ad-scale", type=float, default=3.0e-3)
    p.add_argument("--table", metavar="PATH", help="also write a markdown table")
    p.add_argument("--out", required=True, metavar="PATH",
                   help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="train and score all modes on shared data splits")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--modes", nargs="+", metavar="MODE")
    p.add_argument("--seeds", type=int, nargs="+", metavar="SEED")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True, metavar="BASE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", parents=[common],
                       help="render one map slice as a 16-bit PGM image")
    p.add_argument("--in", dest="inp", required=True, metavar="BASE")
    p.add_argument("--metric", choices=["fa", "md", "ad"], default="fa")
    p.add_argument("--axis", choices=sorted(_AXES), default="z")
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--reference", metavar="BASE",
                   help="render |input - reference| instead of the raw map")
    p.add_argument("--data-range", type=float, default=None,
                   help="value mapped to full intensity (default: slice max)")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    threads = _apply_threads(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (None, 0) else int(exc.code)
    try:
        return args.func(args, threads)
    except CliError as exc:
        print(f"ERROR[{exc.code}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError, KeyError, IndexError) as exc:
        print(f"ERROR[validation]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ERROR[io]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort runtime mapping
        print(f"ERROR[runtime]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
