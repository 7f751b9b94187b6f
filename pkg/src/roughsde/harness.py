"""Experiment orchestration: configs, oracles, convergence and stability studies, reports.

Every comparison uses common random numbers: one Brownian ensemble and one
rough driver are drawn on the finest grid of a ladder and restricted to the
coarser levels, and perturbation arms reuse the base arrays.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .controlled import (ControlledPath, ControlledVectorField, cvf_distance, default_probe, scrp_distance,
                         truncated_moment)
from .io import atomic_write_text, load_arrays
from .roughpath import (RoughPath, _make, lift_brownian, lift_fbm, lift_smooth, restrict,
                        rough_distance)
from .branching import BranchedEnsemble
from .solver import RSDECoefficients, coefficients_from_config, remainder_diagnostics, solve_rsde
from .stats import SlopeFit, loglog_fit, regression_slope
from .timegrid import TimeGrid, holder_norm_lm, make_grid, tensor_norm

__all__ = ["ConfigError", "ExperimentConfig", "oracle_linear_rsde", "oracle_euler_maruyama",
           "build_rough_path", "run_convergence_study", "run_stability_study", "regression_slope",
           "emit_report", "REPORT_SCHEMA"]

REPORT_SCHEMA = "roughsde.report/1"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------- configuration

@dataclass
class ExperimentConfig:
    """Problem, grid ladder, ensemble sizes and seeds of one experiment.

    ``workers`` and ``output`` never influence results and are left out of the
    config hash.
    """

    coefficients: dict
    xi: float | list = 1.0
    T: float = 1.0
    ladder: tuple = (64, 128, 256, 512, 1024)
    rough: dict | None = None
    n_samples: int = 256
    n_inner: int = 64
    seed: int = 0
    oracle: str = "self"
    method: str = "davie"
    m: float = 2.0
    tolerances: dict = field(default_factory=dict)
    remainder: dict | None = None
    stability: dict = field(default_factory=dict)
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        lad = [int(n) for n in self.ladder]
        if not lad:
            raise ConfigError("grid ladder is empty")
        if any(b <= a for a, b in zip(lad[:-1], lad[1:])):
            raise ConfigError("grid ladder must be strictly increasing")
        if any(n < 1 or n & (n - 1) for n in lad):
            raise ConfigError("grid ladder entries must be powers of two")
        self.ladder = tuple(lad)
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")
        if self.n_samples < 1 or self.n_inner < 1:
            raise ConfigError("ensemble sizes must be positive")
        if self.oracle not in ("linear", "gbm", "euler_maruyama", "self", "none"):
            raise ConfigError(f"unknown oracle {self.oracle!r}")
        if self.method not in ("davie", "picard"):
            raise ConfigError(f"unknown method {self.method!r}")
        self.seed = int(self.seed) & ((1 << 64) - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "coefficients" not in d:
            raise ConfigError("config needs a [coefficients] table")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ladder"] = list(self.ladder)
        return d

    def result_dict(self) -> dict:
        d = self.to_dict()
        d.pop("workers")
        d.pop("output")
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self.result_dict()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def build_coefficients(self) -> RSDECoefficients:
        try:
            return coefficients_from_config(self.coefficients)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad coefficients: {exc}") from exc


# --------------------------------------------------------------------- drivers

def _smooth_callable(opts: dict, dim: int):
    kind = opts.get("path", "sin")
    if kind == "sin":
        amp = np.broadcast_to(np.asarray(opts.get("amp", 1.0), dtype=np.float64), (dim,))
        freq = np.broadcast_to(np.asarray(opts.get("freq", 1.0), dtype=np.float64), (dim,))
        phase = np.broadcast_to(np.asarray(opts.get("phase", 0.0), dtype=np.float64), (dim,))
        shift = amp * np.sin(phase)
        return lambda t: amp * np.sin(2 * np.pi * freq * t[:, None] + phase) - shift
    if kind == "poly":
        coeffs = np.asarray(opts.get("coeffs", [[0.0, 1.0]]), dtype=np.float64).reshape(dim, -1)
        return lambda t: np.stack([np.polynomial.polynomial.polyval(t, c) for c in coeffs], axis=-1)
    if kind == "linear":
        v = np.broadcast_to(np.asarray(opts.get("velocity", 1.0), dtype=np.float64), (dim,))
        return lambda t: t[:, None] * v
    raise ConfigError(f"unknown smooth path {kind!r}")


def build_rough_path(opts: dict | None, grid: TimeGrid, dim: int, seed: int, n_samples: int = 1):
    """Rough driver from a config table; None means no rough driver.

    Kinds: ``smooth`` (``path`` = sin | poly | linear), ``brownian``
    (``calculus``, ``alpha``, ``subgrid``), ``fbm`` (``H``, ``alpha``),
    ``file`` (binary with ``X`` and ``anchor`` records on the same grid).
    Random kinds give one fixed realisation (``sample``, default 0) unless
    ``random = true``, in which case there is one driver per sample.
    """
    if opts is None or opts.get("kind", "none") == "none":
        return None
    opts = dict(opts)
    kind = opts.pop("kind")
    rseed = int(opts.get("seed", seed))
    random = bool(opts.get("random", False))
    count = n_samples if random else int(opts.get("sample", 0)) + 1
    if kind == "smooth":
        return lift_smooth(_smooth_callable(opts, dim), grid, int(opts.get("refine", 64)),
                           float(opts.get("alpha", 0.5)))
    if kind == "brownian":
        rp = lift_brownian(dim, grid, rseed, opts.get("calculus", "stratonovich"),
                           int(opts.get("subgrid", 64)), count, float(opts.get("alpha", 0.45)))
    elif kind == "fbm":
        H = float(opts.get("H", 0.5))
        rp = lift_fbm(H, dim, grid, rseed, int(opts.get("fine_factor", 8)), count, opts.get("alpha"))
    elif kind == "file":
        g, arrs = load_arrays(opts["path"])
        if not g.same_as(grid):
            raise ConfigError("rough path file lives on another grid")
        return _make(g, arrs["X"], arrs["anchor"], float(opts.get("alpha", 0.45)),
                     opts.get("flavor", "geometric"))
    else:
        raise ConfigError(f"unknown rough path kind {kind!r}")
    return rp if random else rp.sample(count - 1)


def _block_sum(noise: np.ndarray, factor: int) -> np.ndarray:
    M, N, d = noise.shape
    return noise.reshape(M, N // factor, factor, d).sum(axis=2)


# --------------------------------------------------------------------- oracles

def oracle_linear_rsde(a: float, c: float, lam: float, xi, B, X, grid: TimeGrid) -> np.ndarray:
    """``Y_t = xi exp((a - c^2/2) t + c B_t + lam (X_t - X_0))`` on the grid.

    ``B`` holds scalar Brownian paths ``(M, N+1)`` (or ``(M, N+1, 1)``), ``X``
    a scalar geometric driver ``(N+1,)`` or one per sample. Returns ``(M, N+1, 1)``.
    """
    B = np.asarray(B, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if B.ndim == 3:
        if B.shape[-1] != 1:
            raise ValueError("the closed form is for scalar problems")
        B = B[..., 0]
    if X.shape[-1:] == (1,) and X.ndim >= 2:
        X = X[..., 0]
    if B.ndim != 2 or B.shape[1] != grid.N + 1 or X.shape[-1] != grid.N + 1:
        raise ValueError("the closed form is for scalar problems on the grid")
    xi = np.asarray(xi, dtype=np.float64).reshape(-1, 1) if np.ndim(xi) else float(xi)
    t = grid.t[None, :]
    expo = (a - 0.5 * c * c) * t + c * (B - B[:, :1]) + lam * (X - X[..., :1])
    return (xi * np.exp(expo))[..., None]


def oracle_euler_maruyama(b, sigma, xi, dB, grid: TimeGrid) -> np.ndarray:
    """Euler-Maruyama ``y + b(t, y) h + sigma(t, y) dB`` with given increments ``(M, N, d)``.

    ``b`` maps ``(t, y (M, w)) -> (M, w)``; ``sigma`` maps to ``(M, w, d)``.
    Either may be None.
    """
    dB = np.asarray(dB, dtype=np.float64)
    M, N, d = dB.shape
    xi = np.asarray(xi, dtype=np.float64)
    w = xi.shape[-1] if xi.ndim else 1
    Y = np.empty((M, N + 1, w))
    Y[:, 0] = xi
    h = np.diff(grid.t)
    for k in range(N):
        y = Y[:, k]
        nxt = y
        if b is not None:
            nxt = nxt + b(grid.t[k], y) * h[k]
        if sigma is not None:
            nxt = nxt + (sigma(grid.t[k], y) * dB[:, k, None, :]).sum(axis=-1)
        Y[:, k + 1] = nxt
    return Y


def _linear_params(coeffs: RSDECoefficients):
    """``(a, c, lam)`` of a scalar linear problem, or raise."""
    if coeffs.w != 1 or coeffs.dim_B != 1 or coeffs.dim_X != 1:
        raise ConfigError("linear oracle needs a scalar problem")
    out = []
    for fld in (coeffs.b, coeffs.sigma, coeffs.f):
        if fld is None:
            out.append(0.0)
            continue
        if fld.name != "linear":
            raise ConfigError("linear oracle needs linear coefficients")
        out.append(float(np.asarray(fld.params.get("A", fld.params.get("lam", 1.0))).ravel()[0]))
    return tuple(out)


# --------------------------------------------------------------------- convergence

def _l2_error(err: np.ndarray):
    """``sqrt(E|e|^2)`` over samples with a delta-method standard error."""
    sq = np.sum(err.reshape(err.shape[0], -1) ** 2, axis=1)
    est = math.sqrt(float(sq.mean()))
    if sq.size < 2 or est == 0.0:
        return est, 0.0
    return est, float(sq.std(ddof=1) / math.sqrt(sq.size) / (2.0 * est))


def _problem_arrays(cfg: ExperimentConfig, coeffs: RSDECoefficients):
    fine = make_grid(cfg.T, cfg.ladder[-1])
    noise = None
    if coeffs.sigma is not None:
        noise = rng.brownian_increments(fine, cfg.n_samples, coeffs.dim_B, cfg.seed, "B")
    rp = build_rough_path(cfg.rough, fine, coeffs.dim_X, cfg.seed, cfg.n_samples)
    if coeffs.f is not None and rp is None:
        raise ConfigError("rough coefficient given without a rough driver")
    return fine, noise, rp


def _level(fine: TimeGrid, noise, rp, N: int):
    factor = fine.N // N
    g = fine.coarsen(factor)
    nz = None if noise is None else _block_sum(noise, factor)
    return g, nz, (None if rp is None else restrict(rp, factor))


def run_convergence_study(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """Terminal strong errors along the grid ladder with a log-log slope fit."""
    workers = cfg.workers if workers is None else workers
    coeffs = cfg.build_coefficients()
    fine, noise, rp = _problem_arrays(cfg, coeffs)
    M = cfg.n_samples
    reference = None
    ladder = list(cfg.ladder)
    if cfg.oracle in ("linear", "gbm"):
        a, c, lam = _linear_params(coeffs)
        if cfg.oracle == "gbm":
            lam = 0.0
        B = rng.cumulative(noise)[..., 0] if noise is not None else np.zeros((M, fine.N + 1))
        X = rp.X if rp is not None else np.zeros(fine.N + 1)
        if rp is not None and rp.flavor != "geometric":
            raise ConfigError("linear oracle needs a geometric driver")
        reference = oracle_linear_rsde(a, c, lam, cfg.xi, B, X, fine)[:, -1]
    elif cfg.oracle == "self":
        top = solve_rsde(coeffs, rp, noise, cfg.xi, fine, cfg.method, workers)
        reference = top.Y[:, -1]
        ladder = ladder[:-1]
    elif cfg.oracle == "none":
        raise ConfigError("convergence study needs an oracle or self-reference")
    rows = []
    for N in ladder:
        g, nz, rpl = _level(fine, noise, rp, N)
        traj = solve_rsde(coeffs, rpl, nz, cfg.xi, g, cfg.method, workers)
        if cfg.oracle == "euler_maruyama":
            b = None if coeffs.b is None else coeffs.b.f
            s = None if coeffs.sigma is None else coeffs.sigma.f
            ref = oracle_euler_maruyama(b, s, traj.Y[:, 0], nz if nz is not None else
                                        np.zeros((M, N, coeffs.dim_B)), g)[:, -1]
        else:
            ref = reference
        ok = ~traj.blown_up
        err, se = _l2_error(traj.Y[ok, -1] - ref[ok])
        scale, _ = _l2_error(ref[ok])
        rows.append(dict(N=N, h=cfg.T / N, error=err, stderr=se,
                         rel_error=err / scale if scale > 0 else float("nan"),
                         n_used=int(ok.sum()), n_blown_up=int((~ok).sum())))
    fit = loglog_fit([r["h"] for r in rows], [r["error"] for r in rows])
    target = cfg.tolerances.get("slope")
    report = dict(kind="convergence", oracle=cfg.oracle, method=cfg.method, rows=rows,
                  fit=fit.as_dict(), monotone=all(b["error"] < a["error"] for a, b in zip(rows, rows[1:])))
    if target is not None:
        report["verdict"] = fit.verdict(float(target), cfg.tolerances.get("r2_min", 0.9))
        report["target_slope"] = float(target)
    if cfg.remainder:
        report["remainder"] = _remainder_section(cfg, coeffs, fine, rp)
    return report


def _remainder_section(cfg, coeffs, fine, rp) -> dict:
    opts = dict(cfg.remainder)
    if rp is not None and rp.is_random:
        raise ConfigError("remainder diagnostics need a fixed driver realisation")
    be = BranchedEnsemble(fine, int(opts.get("n_outer", min(cfg.n_samples, 64))),
                          int(opts.get("n_inner", cfg.n_inner)), coeffs.dim_B, cfg.seed,
                          name="B")
    if rp is None:
        rp = lift_smooth(lambda t: np.zeros((t.size, coeffs.dim_X)), fine, 2)
    res = remainder_diagnostics(None, coeffs, rp, None, int(opts.get("fine_factor", 4)), be,
                                cfg.m, float(opts.get("n", np.inf)), xi=cfg.xi,
                                alpha=opts.get("alpha"), alpha_bar_prime=opts.get("alpha_bar_prime"))
    return res.report


# --------------------------------------------------------------------- stability

def _scaled_field(fld: ControlledVectorField, c: float) -> ControlledVectorField:
    fp = None if fld.fprime is None else (lambda t, y: c * fld.fprime(t, y))
    return ControlledVectorField(lambda t, y: c * fld.f(t, y), lambda t, y: c * fld.Df(t, y),
                                 fld.out_shape, fld.w, fp, None, fld.gamma, f"{fld.name}*{c!r}",
                                 dict(fld.params, scale=c), fld.global_bound)


def _perturb(channel: str, eps: float, coeffs, rp, xi):
    xi = np.asarray(xi, dtype=np.float64)
    if channel == "xi":
        return coeffs, rp, xi + eps
    if channel in ("rough", "X", "XX"):
        return coeffs, rp.dilate(1.0 + eps), xi
    if channel in ("b", "sigma", "f"):
        fld = getattr(coeffs, channel)
        if fld is None:
            raise ConfigError(f"cannot perturb absent coefficient {channel!r}")
        kw = dict(b=coeffs.b, sigma=coeffs.sigma, f=coeffs.f)
        kw[channel] = _scaled_field(fld, 1.0 + eps)
        return RSDECoefficients(coeffs.w, coeffs.dim_B, coeffs.dim_X, declared=coeffs.declared, **kw), rp, xi
    raise ConfigError(f"unknown perturbation channel {channel!r}")


def _sup_gap(f1, f2, probe, grid) -> float:
    if f1 is None:
        return 0.0
    t = grid.t[None, :]
    y = np.broadcast_to(probe[:, None, :], (probe.shape[0], grid.N + 1, probe.shape[1]))
    return float(np.max(tensor_norm(f1(t, y) - f2(t, y), len(f1.out_shape))))


def _input_distance(channel, base, pert, rp, rpb, xi, xib, probe, grid, m, alpha) -> dict:
    c0, c1 = base, pert
    d = dict(xi=truncated_moment(np.broadcast_to(xi - xib, np.broadcast_shapes(np.shape(xi), np.shape(xib))), m),
             rough=0.0 if rp is None else float(np.max(rough_distance(rp, rpb, alpha))),
             b=_sup_gap(c0.b, c1.b, probe, grid), sigma=_sup_gap(c0.sigma, c1.sigma, probe, grid))
    if c0.f is not None:
        cv = cvf_distance(c0.f, rp, c1.f, rpb, m, alpha, alpha, probe)
        d["f"] = float(cv["distance"] + sum(cv["sup_norms"].values()))
    else:
        d["f"] = 0.0
    d["total"] = float(sum(d.values()))
    return d


def run_stability_study(cfg: ExperimentConfig, perturbations=None, workers: int | None = None) -> dict:
    """Output/input distance ratios along a geometric ladder of perturbation sizes."""
    workers = cfg.workers if workers is None else workers
    st = dict(cfg.stability)
    channels = list(perturbations or st.get("channels", ["xi", "rough", "sigma", "f"]))
    eps_ladder = [float(e) for e in st.get("eps", [10.0 ** (-3 + 0.5 * k) for k in range(5)])]
    N = int(st.get("N", cfg.ladder[-1]))
    coeffs = cfg.build_coefficients()
    fine = make_grid(cfg.T, N)
    noise = None
    if coeffs.sigma is not None:
        noise = rng.brownian_increments(fine, cfg.n_samples, coeffs.dim_B, cfg.seed, "B")
    rp = build_rough_path(cfg.rough, fine, coeffs.dim_X, cfg.seed, cfg.n_samples)
    alpha = float(st.get("alpha", rp.alpha if rp is not None else 0.5))
    m = cfg.m
    # dyadic-gap pairs by default: the seminorms are scanned many times per study
    budget = int(st.get("pair_budget", 0))
    base = solve_rsde(coeffs, rp, noise, cfg.xi, fine, cfg.method, workers)
    probe = default_probe(base.Y, int(st.get("probe_points", 9)))

    def arm(job):
        channel, eps = job
        c1, rp1, xi1 = _perturb(channel, eps, coeffs, rp, cfg.xi)
        pert = solve_rsde(c1, rp1, noise, xi1, fine, cfg.method, 1)
        ok = ~(base.blown_up | pert.blown_up)
        cp0, cp1 = base.controlled_path(), pert.controlled_path()
        sub = lambda cp: ControlledPath(fine, cp.Z[ok], cp.Zp[ok], 1, alpha, alpha)
        rps = lambda r: r if r is None or not r.is_random else restrict_samples(r, ok)
        if rp is None:
            out_d = _output_without_driver(sub(cp0), sub(cp1), m, alpha, budget)
        else:
            out_d = scrp_distance(sub(cp0), rps(rp), sub(cp1), rps(rp1), m, alpha, alpha,
                                  pair_budget=budget)
        inp = _input_distance(channel, coeffs, c1, rp, rp1, np.asarray(cfg.xi, float), xi1,
                              probe, fine, m, alpha)
        return dict(channel=channel, eps=eps, input=inp, output=float(out_d),
                    ratio=float(out_d / inp["total"]) if inp["total"] > 0 else
                    (0.0 if out_d == 0 else float("inf")),
                    n_censored=int((~ok).sum()))

    jobs = [(ch, 0.0) for ch in channels] + [(ch, e) for ch in channels for e in eps_ladder]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arms = list(pool.map(arm, jobs))
    else:
        arms = [arm(j) for j in jobs]
    zero = arms[:len(channels)]
    rest = arms[len(channels):]
    bound = float(st.get("ratio_bound", 4.0))
    summary = {}
    for ch in channels:
        r = [a["ratio"] for a in rest if a["channel"] == ch and np.isfinite(a["ratio"]) and a["ratio"] > 0]
        spread = max(r) / min(r) if r else float("nan")
        summary[ch] = dict(ratio_min=min(r) if r else float("nan"), ratio_max=max(r) if r else float("nan"),
                           spread=spread, bounded=bool(r) and spread <= bound)
    return dict(kind="stability", N=N, eps=eps_ladder, channels=channels, arms=rest,
                zero_arms=zero, zero_output_exact=all(a["output"] == 0.0 for a in zero),
                summary=summary, ratio_bound=bound, n_samples=cfg.n_samples)


def restrict_samples(rp: RoughPath, keep: np.ndarray) -> RoughPath:
    X = rp.X[keep]
    return _make(rp.grid, X, rp.anchor()[keep], rp.alpha, rp.flavor)


def _output_without_driver(cp0, cp1, m, alpha, budget) -> float:
    return (truncated_moment(cp0.Z_at(0) - cp1.Z_at(0), m, 1)
            + holder_norm_lm(cp0.dZ - cp1.dZ, alpha, m, pair_budget=budget))


# --------------------------------------------------------------------- reports

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, SlopeFit):
        return _jsonable(x.as_dict())
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if math.isnan(v):
            return "NaN"
        if math.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        return v
    if x is None or isinstance(x, (int, str)):
        return x
    return repr(x)


def emit_report(results: dict | None, format: str = "json", path=None, config: ExperimentConfig | None = None) -> str:
    """Deterministic serialisation of a results dict; written atomically if ``path`` is given.

    JSON has sorted keys and shortest round-trip floats; non-finite floats are
    spelled as strings. CSV emits the ``rows`` table (convergence reports use
    the columns ``N, h, error, stderr``).
    """
    results = {} if results is None else dict(results)
    if format == "json":
        doc = dict(schema=REPORT_SCHEMA, results=_jsonable(results))
        if config is not None:
            doc["config_hash"] = config.config_hash
            doc["seeds"] = dict(seed=config.seed, rough_seed=(config.rough or {}).get("seed", config.seed))
            doc["config"] = _jsonable(config.result_dict())
        text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    elif format == "csv":
        rows = results.get("rows", [])
        cols = ["N", "h", "error", "stderr"] if results.get("kind", "convergence") == "convergence" \
            else sorted({k for r in rows for k in r})
        buf = _io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([repr(float(r[c])) if isinstance(r.get(c), float) else r.get(c, "") for c in cols])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {format!r}")
    if path is not None:
        atomic_write_text(path, text)
    return text
