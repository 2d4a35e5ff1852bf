"""Command-line entry point: ``fsae <subcommand> ...``.

Every subcommand reads and writes field files (see :mod:`fieldspace.io`) and
CSV tables. On failure a single machine-parsable line is written to stderr::

    fsae: error code=<name> exit=<n> message=<text>

and the process exits with the matching nonzero status.
"""
import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as fio
from .healpix import ang2pix
from .metrics import (angular_power_spectrum, evaluate_fields, write_metrics_csv,
                      write_spectrum_csv)
from .multiscale import MultiScaleState, check_ladder, decompose, reconstruct
from .nn import TrainConfig
from .preprocess import NormStats, fit_percentiles, scale, unscale
from .synthetic import generate_fields

log = logging.getLogger("fieldspace")

EXIT_CODES = {
    "runtime": 1,
    "usage": 2,
    "missing-file": 3,
    "bad-magic": 4,
    "truncated": 5,
    "config": 6,
    "non-finite": 7,
    "mismatch": 8,
    "format": 9,
    "unsupported": 9,
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code

    @property
    def exit_code(self):
        return EXIT_CODES.get(self.code, 1)


@dataclass
class RunConfig:
    """Run configuration; file keys are the field names with ``_`` read as ``.``
    for the first separator (``levels.base``, ``train.max_iters``, ...)."""

    seed: int = 0
    variable: str = "tas"
    levels_base: int = 0
    levels_residual: tuple = (3, 4, 5)
    levels_bottleneck: int = 3
    model_d_model: int = 64
    model_d_head: int = 16
    model_sh_degree: int = 8
    model_sh_level: int = 3
    train_lr: float = 1e-3
    train_warmup: int = 100
    train_max_iters: int = 2000
    train_batch_size: int = 8
    norm_path: str = ""
    diffusion_window: int = 3
    diffusion_d_model: int = 32
    diffusion_n_blocks: int = 2
    diffusion_d_head: int = 8
    diffusion_steps: int = 1000
    diffusion_sample_steps: int = 100
    diffusion_sh_degree: int = 4
    diffusion_sh_level: int = 2
    diffusion_lr: float = 1e-3
    diffusion_warmup: int = 50
    diffusion_max_iters: int = 400
    diffusion_batch_size: int = 8
    diffusion_base_weight: float = 1.0
    norm: dict = field(default_factory=dict)  # inline "norm.<var>.p01/p99" entries

    @staticmethod
    def key_of(name):
        return name.replace("_", ".", 1) if name not in ("seed", "variable") else name

    @classmethod
    def from_mapping(cls, mapping, base_dir=None):
        by_key = {cls.key_of(f.name): f for f in fields(cls) if f.name != "norm"}
        kwargs, norm = {}, {}
        for key, value in mapping.items():
            if key in by_key:
                f = by_key[key]
                if f.type is tuple:
                    value = tuple(value) if isinstance(value, tuple) else (value,)
                elif f.type is str:
                    value = str(value)
                elif f.type is float and isinstance(value, int):
                    value = float(value)
                kwargs[f.name] = value
            elif key.startswith("norm.") and key.count(".") == 2:
                norm[key] = value
            else:
                raise CliError("config", f"unknown config key {key!r}")
        cfg = cls(**kwargs, norm=norm)
        if cfg.norm_path and base_dir is not None and not Path(cfg.norm_path).is_absolute():
            cfg.norm_path = str(Path(base_dir) / cfg.norm_path)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls()
        if not Path(path).is_file():
            raise CliError("missing-file", f"config file {path} not found")
        try:
            mapping = fio.read_kv(path)
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        return cls.from_mapping(mapping, Path(path).parent)

    def validate(self):
        try:
            check_ladder(self.levels_base, self.levels_residual)
            if not self.levels_base < self.levels_bottleneck <= min(self.levels_residual):
                raise ValueError("levels.bottleneck must lie in (levels.base, min(levels.residual)]")
            TrainConfig(self.train_lr, self.train_warmup, self.train_max_iters,
                        self.train_batch_size, self.model_d_model, self.model_d_head)
            TrainConfig(self.diffusion_lr, self.diffusion_warmup, self.diffusion_max_iters,
                        self.diffusion_batch_size, self.diffusion_d_model, self.diffusion_d_head)
            for name in ("train_batch_size", "diffusion_batch_size", "diffusion_window",
                         "diffusion_n_blocks", "diffusion_steps"):
                if getattr(self, name) < 1:
                    raise ValueError(f"{self.key_of(name)} must be positive")
            if not 1 <= self.diffusion_sample_steps <= self.diffusion_steps:
                raise ValueError("diffusion.sample_steps must be in [1, diffusion.steps]")
            if not self.train_lr > 0 or not self.diffusion_lr > 0:
                raise ValueError("learning rates must be positive")
        except (ValueError, TypeError) as exc:
            raise CliError("config", str(exc)) from exc

    def to_mapping(self):
        out = {self.key_of(k): v for k, v in asdict(self).items() if k != "norm"}
        out.update(self.norm)
        return out

    def norm_stats(self, variable):
        """Percentile stats for ``variable`` from inline keys or ``norm.path``; None if absent."""
        entries = dict(self.norm)
        if self.norm_path:
            if not Path(self.norm_path).is_file():
                raise CliError("missing-file", f"norm file {self.norm_path} not found")
            entries.update(fio.read_kv(self.norm_path))
        if f"norm.{variable}.p01" not in entries:
            return None
        try:
            return NormStats.from_dict(entries, variable)
        except (KeyError, ValueError) as exc:
            raise CliError("config", f"bad norm stats for {variable!r}: {exc}") from exc

    def autoencoder(self):
        from .autoencoder import FieldSpaceAutoencoder

        return FieldSpaceAutoencoder(
            base_level=self.levels_base, residual_levels=tuple(self.levels_residual),
            bottleneck_level=self.levels_bottleneck, d_model=self.model_d_model,
            d_head=self.model_d_head, sh_degree=self.model_sh_degree,
            sh_level=self.model_sh_level, learning_rate=self.train_lr,
            warmup_iters=self.train_warmup, max_iters=self.train_max_iters,
            batch_size=self.train_batch_size, random_state=self.seed)

    def diffusion(self):
        from .diffusion import CompressedFieldDiffusion

        return CompressedFieldDiffusion(
            window=self.diffusion_window, d_model=self.diffusion_d_model,
            n_blocks=self.diffusion_n_blocks, d_head=self.diffusion_d_head,
            n_diffusion_steps=self.diffusion_steps, sample_steps=self.diffusion_sample_steps,
            learning_rate=self.diffusion_lr, warmup_iters=self.diffusion_warmup,
            max_iters=self.diffusion_max_iters, batch_size=self.diffusion_batch_size,
            base_weight=self.diffusion_base_weight, sh_degree=self.diffusion_sh_degree,
            sh_level=self.diffusion_sh_level, random_state=self.seed)


# -- file helpers -------------------------------------------------------------

def _expand(paths, suffix=".fsf"):
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.name.endswith(suffix)))
        elif p.is_file():
            out.append(p)
        else:
            raise CliError("missing-file", f"{p} not found")
    return out


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise CliError("missing-file", f"{path} not found")
    try:
        rec = fio.read_field(path)
    except fio.FormatError as exc:
        raise CliError(exc.code, str(exc)) from exc
    if not np.all(np.isfinite(rec.values)):
        raise CliError("non-finite", f"{path}: payload contains non-finite values")
    return rec


def _read_stack(paths, level=None):
    recs = [_read(p) for p in paths]
    if not recs:
        raise CliError("missing-file", "no input field files")
    levels = {r.level for r in recs}
    if len(levels) != 1 or (level is not None and level not in levels):
        want = f"level {level}" if level is not None else "one common level"
        raise CliError("mismatch", f"inputs are at levels {sorted(levels)}, expected {want}")
    return recs, np.stack([r.values for r in recs])


def _variable_of(recs):
    names = {r.variable for r in recs}
    if len(names) != 1:
        raise CliError("mismatch", f"inputs mix variables {sorted(names)}")
    return names.pop()


def _mkdir(path):
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_ckpt(loader, path):
    if not Path(path).is_file():
        raise CliError("missing-file", f"checkpoint {path} not found")
    try:
        return loader(path)
    except fio.FormatError as exc:
        raise CliError(exc.code, str(exc)) from exc


# -- subcommands --------------------------------------------------------------

def cmd_gen_synthetic(args):
    try:
        values, days = generate_fields(args.level, args.count, args.slope, args.seed,
                                       start_day=args.start_day)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    out = _mkdir(args.out)
    for v, d in zip(values, days):
        fio.write_field(out / f"{args.variable}_{int(d):06d}.fsf", v, args.level,
                        args.variable, int(d))
    log.info("wrote %d fields to %s", len(days), out)


def cmd_remap(args):
    from .remap import HealpixRemapper

    if not Path(args.input).is_file():
        raise CliError("missing-file", f"{args.input} not found")
    with np.load(args.input) as npz:
        try:
            lat, lon, values = npz["lat"], npz["lon"], npz["values"]
        except KeyError as exc:
            raise CliError("format", f"{args.input}: missing array {exc}") from exc
        variable = str(npz["variable"]) if "variable" in npz else args.variable
        day = int(npz["day"]) if "day" in npz else args.day
    if values.ndim != 2:
        raise CliError("mismatch", "values must be a single (n_lat, n_lon) grid")
    if not np.all(np.isfinite(values)):
        raise CliError("non-finite", f"{args.input}: grid contains non-finite values")
    try:
        hp = HealpixRemapper(args.level, args.neighbors, args.power).fit(lat, lon)
        out = hp.transform(values)
    except ValueError as exc:
        raise CliError("mismatch", str(exc)) from exc
    fio.write_field(args.out, out, args.level, variable, day)


def cmd_decompose(args):
    cfg = RunConfig.load(args.config)
    top = max(cfg.levels_residual)
    rec = _read(args.input)
    if rec.level != top:
        raise CliError("mismatch", f"input at level {rec.level}, config expects {top}")
    state = decompose(rec.values, cfg.levels_base, cfg.levels_residual)
    out = _mkdir(args.out)
    fio.write_field(out / f"base_z{state.base_level}.fsf", state.base, state.base_level,
                    rec.variable, rec.timestamp)
    for z, r in state.residuals.items():
        fio.write_field(out / f"residual_z{z}.fsf", r, z, rec.variable, rec.timestamp)


def cmd_reconstruct(args):
    recs = sorted((_read(p) for p in _expand([args.input])), key=lambda r: r.level)
    if len(recs) < 2:
        raise CliError("missing-file", f"{args.input}: need a base and at least one residual")
    levels = [r.level for r in recs]
    if len(set(levels)) != len(levels):
        raise CliError("mismatch", f"duplicate levels {levels}")
    base = recs[0]
    state = MultiScaleState(base.values, base.level, {r.level: r.values for r in recs[1:]})
    try:
        check_ladder(base.level, state.levels)
    except ValueError as exc:
        raise CliError("mismatch", str(exc)) from exc
    fio.write_field(args.out, reconstruct(state), state.top_level, base.variable,
                    base.timestamp)


def cmd_fit_norm(args):
    recs = [_read(p) for p in _expand(args.inputs)]
    if not recs:
        raise CliError("missing-file", "no input field files")
    by_var = {}
    for r in recs:
        by_var.setdefault(r.variable, []).append(r.values)
    mapping = {}
    for var in sorted(by_var):
        try:
            mapping.update(fit_percentiles(np.concatenate(by_var[var]), var).to_dict())
        except ValueError as exc:
            raise CliError("non-finite" if "finite" in str(exc) else "mismatch",
                           f"{var}: {exc}") from exc
    fio.write_kv(args.out, mapping)


def _normalize(values, stats):
    return values if stats is None else scale(values, stats)


def _denormalize(values, stats):
    return values if stats is None else unscale(values, stats)


def cmd_train_ae(args):
    cfg = RunConfig.load(args.config)
    if args.max_iters is not None:
        cfg.train_max_iters = args.max_iters
        cfg.train_warmup = min(cfg.train_warmup, args.max_iters - 1)
        cfg.validate()
    recs, X = _read_stack(_expand(args.data), max(cfg.levels_residual))
    variable = _variable_of(recs)
    stats = cfg.norm_stats(variable)
    est = cfg.autoencoder()
    losses = []
    try:
        est.fit(_normalize(X, stats), callback=lambda it, loss: losses.append((it, loss)))
    except FloatingPointError as exc:
        raise CliError("non-finite", str(exc)) from exc
    extra = {"run": cfg.to_mapping(), "variable": variable,
             "norm": stats.to_dict() if stats else None}
    fio.save_autoencoder(args.out, est, extra)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iteration", "loss"))
            w.writerows((it, repr(loss)) for it, loss in losses)
    log.info("final loss %.6g", losses[-1][1] if losses else float("nan"))


def _ae_and_stats(path):
    est, cfg = _load_ckpt(fio.load_autoencoder, path)
    variable = cfg.get("variable", "")
    stats = NormStats.from_dict(cfg["norm"], variable) if cfg.get("norm") else None
    return est, variable, stats


def _check_variable(recs, variable):
    for r in recs:
        if variable and r.variable != variable:
            raise CliError("mismatch", f"checkpoint is for {variable!r}, got {r.variable!r}")


def cmd_encode(args):
    est, variable, stats = _ae_and_stats(args.checkpoint)
    paths = _expand(args.inputs)
    recs, X = _read_stack(paths, est.top_level)
    _check_variable(recs, variable)
    state = est.encode(_normalize(X, stats))
    out = _mkdir(args.out)
    for p, r, b, c in zip(paths, recs, state.base, state.code):
        fio.write_field(out / f"{p.stem}.base.fsf", b, state.base_level, r.variable, r.timestamp)
        fio.write_field(out / f"{p.stem}.code.fsf", c, state.code_level, r.variable, r.timestamp)


def _pairs(paths):
    """Group ``<stem>.base.fsf`` / ``<stem>.code.fsf`` files by stem."""
    pairs = {}
    for p in _expand(paths):
        for kind in ("base", "code"):
            tag = f".{kind}.fsf"
            if p.name.endswith(tag):
                pairs.setdefault(p.name[:-len(tag)], {})[kind] = p
    for stem, d in pairs.items():
        if len(d) != 2:
            raise CliError("missing-file", f"{stem}: needs both .base.fsf and .code.fsf")
    if not pairs:
        raise CliError("missing-file", "no encoded (.base/.code) field pairs found")
    return dict(sorted(pairs.items()))


def cmd_decode(args):
    from .autoencoder import CompressedState

    est, variable, stats = _ae_and_stats(args.checkpoint)
    pairs = _pairs(args.inputs)
    brecs, B = _read_stack([d["base"] for d in pairs.values()], est.base_level)
    crecs, C = _read_stack([d["code"] for d in pairs.values()], est.bottleneck_level)
    _check_variable(brecs, variable)
    Y = est.decode(CompressedState(B, est.base_level, C, est.bottleneck_level, est.top_level))
    Y = _denormalize(Y, stats)
    out = _mkdir(args.out)
    for stem, r, y in zip(pairs, brecs, Y):
        fio.write_field(out / f"{stem}.fsf", y, est.top_level, r.variable, r.timestamp)


def cmd_sr(args):
    est, variable, stats = _ae_and_stats(args.checkpoint)
    paths = _expand(args.inputs)
    recs, X = _read_stack(paths)
    _check_variable(recs, variable)
    z_in = recs[0].level
    mask = tuple(sorted(set(args.mask_levels)))
    bad = set(mask) - set(est.levels_)
    if bad:
        raise CliError("config", f"mask levels {sorted(bad)} not in the residual ladder "
                                 f"{list(est.levels_)}")
    X = _normalize(X, stats)
    if z_in == est.top_level:
        Y = est.reconstruct(X, mask_levels=mask)
    else:
        need = tuple(range(z_in + 1, est.top_level + 1))
        if mask and mask != need:
            raise CliError("config", f"a level-{z_in} input implies --mask-levels "
                                     f"{','.join(map(str, need))}")
        try:
            Y = est.super_resolve(X)
        except ValueError as exc:
            raise CliError("mismatch", str(exc)) from exc
    Y = _denormalize(Y, stats)
    out = _mkdir(args.out)
    for p, r, y in zip(paths, recs, Y):
        fio.write_field(out / f"{p.stem}.fsf", y, est.top_level, r.variable, r.timestamp)


def _member_arrays(dirs):
    """Stack encoded pairs from one directory per member into (M, T, V, npix) arrays."""
    bases, codes, days, variables = [], [], None, None
    for d in dirs:
        table = {}
        for stem, pair in _pairs([d]).items():
            b, c = _read(pair["base"]), _read(pair["code"])
            if (b.variable, b.timestamp) != (c.variable, c.timestamp):
                raise CliError("mismatch", f"{stem}: base/code headers disagree")
            table[(b.timestamp, b.variable)] = (b, c)
        ts = sorted({k[0] for k in table})
        vs = sorted({k[1] for k in table})
        if len(table) != len(ts) * len(vs):
            raise CliError("mismatch", f"{d}: every day needs every variable")
        if days is None:
            days, variables = ts, vs
        elif (ts, vs) != (days, variables):
            raise CliError("mismatch", f"{d}: days/variables differ from the first member")
        try:
            bases.append(np.array([[table[t, v][0].values for v in vs] for t in ts]))
            codes.append(np.array([[table[t, v][1].values for v in vs] for t in ts]))
        except ValueError as exc:
            raise CliError("mismatch", f"{d}: inconsistent levels") from exc
    return np.array(bases), np.array(codes), np.asarray(days), variables


def cmd_train_diff(args):
    cfg = RunConfig.load(args.config)
    if args.max_iters is not None:
        cfg.diffusion_max_iters = args.max_iters
        cfg.diffusion_warmup = min(cfg.diffusion_warmup, args.max_iters - 1)
        cfg.validate()
    base, code, days, variables = _member_arrays(args.data)
    est = cfg.diffusion()
    try:
        est.fit(base, code, days)
    except FloatingPointError as exc:
        raise CliError("non-finite", str(exc)) from exc
    except ValueError as exc:
        raise CliError("mismatch", str(exc)) from exc
    fio.save_diffusion(args.out, est, {"variables": variables, "run": cfg.to_mapping()})


def cmd_sample(args):
    est, cfg = _load_ckpt(fio.load_diffusion, args.checkpoint)
    variables = cfg["variables"]
    days = args.start_day + np.arange(est.window)
    base, code = est.sample(days, n_members=args.members, seed=args.seed, n_steps=args.steps)
    decoders = {}
    for path in args.ae or ():
        ae, var, stats = _ae_and_stats(path)
        if var not in variables:
            raise CliError("mismatch", f"{path}: variable {var!r} not sampled")
        if (ae.base_level, ae.bottleneck_level) != (est.base_level_, est.code_level_):
            raise CliError("mismatch", f"{path}: levels do not match the sampler")
        decoders[var] = (ae, stats)
    from .autoencoder import CompressedState

    out = _mkdir(args.out)
    fields = {}  # variable -> (members, window, npix) used for the spread table
    for v, var in enumerate(variables):
        if var in decoders:
            ae, stats = decoders[var]
            b = base[:, :, v].reshape(-1, base.shape[-1])
            c = code[:, :, v].reshape(-1, code.shape[-1])
            dec = ae.decode(CompressedState(b, ae.base_level, c, ae.bottleneck_level,
                                            ae.top_level))
            fields[var] = (_denormalize(dec, stats).reshape(args.members, est.window, -1),
                           ae.top_level)
        else:
            fields[var] = (code[:, :, v], est.code_level_)
    for m in range(args.members):
        mdir = _mkdir(out / f"member_{m:02d}")
        for v, var in enumerate(variables):
            for w, d in enumerate(days):
                stem = mdir / f"{var}_{int(d):06d}"
                fio.write_field(f"{stem}.base.fsf", base[m, w, v], est.base_level_, var, int(d))
                fio.write_field(f"{stem}.code.fsf", code[m, w, v], est.code_level_, var, int(d))
                if var in decoders:
                    fio.write_field(f"{stem}.fsf", fields[var][0][m, w], fields[var][1], var,
                                    int(d))
    with open(out / "ensemble_std.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("variable", "day", "level", "pixel", "std"))
        for var, (vals, level) in fields.items():
            std = vals.std(axis=0, ddof=1) if args.members > 1 else np.zeros(vals.shape[1:])
            for w, d in enumerate(days):
                for i, s in enumerate(std[w]):
                    wr.writerow((var, int(d), level, i, repr(float(s))))


def cmd_metrics(args):
    truth, pred = _expand(args.truth), _expand(args.pred)
    if len(truth) != len(pred):
        raise CliError("mismatch", f"{len(truth)} truth files vs {len(pred)} predictions")
    trecs, T = _read_stack(truth)
    precs, P = _read_stack(pred, trecs[0].level)
    rows = []
    variables = [r.variable for r in trecs]
    for var in sorted(set(variables)):
        sel = np.array([v == var for v in variables])
        try:
            rows.extend(evaluate_fields(T[sel], P[sel], var, args.units))
        except ValueError as exc:
            raise CliError("mismatch", f"{var}: {exc}") from exc
    write_metrics_csv(args.out, rows)


def cmd_spectrum(args):
    recs, X = _read_stack(_expand(args.inputs))
    try:
        result = angular_power_spectrum(X, args.lmax)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    write_spectrum_csv(args.out, result)


def cmd_raster(args):
    rec = _read(args.input)
    nlat = args.width // 2
    lat = 90.0 - (np.arange(nlat) + 0.5) * 180.0 / nlat
    lon = (np.arange(args.width) + 0.5) * 360.0 / args.width
    theta = np.deg2rad(90.0 - lat)[:, None] * np.ones(args.width)
    phi = np.ones(nlat)[:, None] * np.deg2rad(lon)
    grid = rec.values[ang2pix(rec.level, theta, phi)]
    np.savetxt(args.out, grid, delimiter=",", fmt="%.7g")


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fsae", description="Field-space autoencoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synthetic", cmd_gen_synthetic, "random power-law fields with an annual cycle")
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--slope", type=float, default=3.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--start-day", type=int, default=0)
    sp.add_argument("--variable", default="tas")
    sp.add_argument("--out", required=True)

    sp = add("remap", cmd_remap, "lat/lon grid (.npz with lat, lon, values) to HEALPix")
    sp.add_argument("--input", required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variable", default="tas")
    sp.add_argument("--day", type=int, default=0)
    sp.add_argument("--neighbors", type=int, default=4)
    sp.add_argument("--power", type=float, default=1.0)

    sp = add("decompose", cmd_decompose, "split a field into base and residuals")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")

    sp = add("reconstruct", cmd_reconstruct, "sum a decomposed directory back to one field")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit-norm", cmd_fit_norm, "1st/99th percentile stats per variable")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-ae", cmd_train_ae, "train the autoencoder")
    sp.add_argument("--config")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--max-iters", type=int)

    for name, fn in (("encode", cmd_encode), ("decode", cmd_decode)):
        sp = add(name, fn, f"{name} fields with a trained autoencoder")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--inputs", nargs="+", required=True)
        sp.add_argument("--out", required=True)

    sp = add("sr", cmd_sr, "zero-shot super-resolution by residual masking")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--mask-levels", type=_int_list, default=())
    sp.add_argument("--out", required=True)

    sp = add("train-diff", cmd_train_diff, "train the compressed-field sampler")
    sp.add_argument("--config")
    sp.add_argument("--data", nargs="+", required=True, help="one encoded directory per member")
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-iters", type=int)

    sp = add("sample", cmd_sample, "draw an ensemble of windows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--members", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--start-day", type=int, default=0)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ae", nargs="*", help="autoencoder checkpoints to decode samples")
    sp.add_argument("--out", required=True)

    sp = add("metrics", cmd_metrics, "RMSE and PSNR table")
    sp.add_argument("--truth", nargs="+", required=True)
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--units", default="")
    sp.add_argument("--out", required=True)

    sp = add("spectrum", cmd_spectrum, "angular power spectrum table")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--lmax", type=int)
    sp.add_argument("--out", required=True)

    sp = add("raster", cmd_raster, "equirectangular CSV dump for quick looks")
    sp.add_argument("--input", required=True)
    sp.add_argument("--width", type=int, default=360)
    sp.add_argument("--out", required=True)
    return p


def _set_threads():
    value = os.environ.get("FSAE_THREADS")
    if not value:
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("config", f"FSAE_THREADS must be a positive integer, got {value!r}")
    import torch

    torch.set_num_threads(n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print("fsae: error code=usage exit=2 message=invalid arguments", file=sys.stderr)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _set_threads()
        if getattr(args, "members", 1) < 1:
            raise CliError("config", "--members must be positive")
        args.func(args)
    except CliError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"fsae: error code={exc.code} exit={exc.exit_code} message={msg}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
