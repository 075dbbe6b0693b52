"""Fixture and configuration files, result writers and the MDP generator.

Inputs are YAML. Parse errors carry the dotted field path and the source
line of the offending node. Every output file starts with a comment line
``# qclt <version> config=<hash>``; timestamps live only in the
``run_info.json`` sidecar so result files are byte-reproducible.
"""

import csv
import hashlib
import io as _io
import json
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ._version import __version__
from .chain import build_joint_chain
from .engine import STREAMS, StepsizeSchedule, replica_rng
from .exceptions import AssumptionViolation, ConfigError
from .mdp import MdpModel

FLOAT_FMT = "{:.17g}"
MAX_REGENERATIONS = 100


def float_list(arr):
    """Nested Python floats; JSON/YAML emit the shortest round-trip repr."""
    return np.asarray(arr, dtype=np.float64).tolist()


def fmt_float(x):
    return FLOAT_FMT.format(float(x))


# --- YAML with line numbers --------------------------------------------------

def _compose(text, source):
    try:
        return yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"malformed YAML in {source}: {exc}", line=line) from exc


def _line_map(node, path="", out=None):
    """Dotted field path -> 1-based line of the node's start."""
    out = {} if out is None else out
    if node is None:
        return out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = str(k.value)
            _line_map(v, f"{path}.{key}" if path else key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, f"{path}[{i}]", out)
    return out


def _load_yaml(text, source):
    node = _compose(text, source)
    if node is None:
        raise ConfigError(f"{source} is empty")
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{source} must be a mapping at top level", line=1)
    return data, _line_map(node)


class _Fields:
    """Typed field access that raises line-anchored :class:`ConfigError`."""

    def __init__(self, data, lines, prefix=""):
        self.data = data
        self.lines = lines
        self.prefix = prefix

    def path(self, key):
        return f"{self.prefix}.{key}" if self.prefix else key

    def line(self, key):
        p = self.path(key)
        return self.lines.get(p, self.lines.get(self.prefix))

    def fail(self, key, msg):
        raise ConfigError(msg, field=self.path(key), line=self.line(key))

    def has(self, key):
        return key in self.data and self.data[key] is not None

    def get(self, key, default=None, required=False):
        if key not in self.data or self.data[key] is None:
            if required:
                self.fail(key, "missing required field")
            return default
        return self.data[key]

    def number(self, key, default=None, required=False):
        v = self.get(key, default, required)
        if v is None:
            return v
        if isinstance(v, bool):
            self.fail(key, "expected a number")
        if isinstance(v, str):
            try:
                return float(Fraction(v.strip()))
            except (ValueError, ZeroDivisionError):
                self.fail(key, f"expected a number or fraction, got {v!r}")
        if not isinstance(v, (int, float)):
            self.fail(key, "expected a number")
        return float(v)

    def integer(self, key, default=None, required=False, minimum=None):
        v = self.get(key, default, required)
        if v is None:
            return v
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(key, "expected an integer")
        if minimum is not None and v < minimum:
            self.fail(key, f"must be >= {minimum}")
        return v

    def flag(self, key, default=False):
        v = self.get(key, default)
        if not isinstance(v, bool):
            self.fail(key, "expected true or false")
        return v

    def array(self, key, required=True):
        v = self.get(key, required=required)
        if v is None:
            return v
        try:
            arr = np.array(v, dtype=np.float64)
        except (TypeError, ValueError):
            self.fail(key, "expected a (nested) list of numbers")
        if arr.dtype == object:
            self.fail(key, "ragged nested list")
        return arr

    def sub(self, key):
        v = self.get(key, {})
        if not isinstance(v, dict):
            self.fail(key, "expected a mapping")
        return _Fields(v, self.lines, self.path(key))


def _worst_row_line(f, key, arr, axis_sums):
    """Line of the first row whose sum is off, for better error anchoring."""
    bad = np.argwhere(np.abs(axis_sums - 1.0) > 1e-12)
    if bad.size == 0:
        bad = np.argwhere(np.any(arr < 0, axis=-1))
    if bad.size == 0:
        return f.path(key), f.line(key)
    idx = "".join(f"[{i}]" for i in bad[0])
    p = f.path(key) + idx
    return p, f.lines.get(p, f.line(key))


# --- MDP fixtures -------------------------------------------------------------

def mdp_from_dict(data, lines=None, source="fixture"):
    """Build an :class:`MdpModel` from a parsed fixture mapping."""
    f = _Fields(data, lines or {})
    n_s = f.integer("n_states", required=True, minimum=1)
    n_a = f.integer("n_actions", required=True, minimum=1)
    gamma = f.number("gamma", required=True)
    if not 0.0 <= gamma < 1.0:
        f.fail("gamma", "discount must lie in [0, 1)")
    P = f.array("transition")
    if P.shape != (n_s, n_a, n_s):
        f.fail("transition", f"expected shape {(n_s, n_a, n_s)}, got {P.shape}")
    rows = P.sum(axis=-1)
    if np.any(P < 0) or np.any(np.abs(rows - 1.0) > 1e-12):
        p, ln = _worst_row_line(f, "transition", P, rows)
        raise ConfigError("transition rows must be nonnegative and sum to 1",
                          field=p, line=ln)
    r = f.array("reward")
    if r.shape != (n_s, n_a):
        f.fail("reward", f"expected shape {(n_s, n_a)}, got {r.shape}")
    if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
        f.fail("reward", "rewards must lie in [0, 1]")
    beh = f.get("behavior_policy", "uniform")
    if isinstance(beh, str):
        if beh != "uniform":
            f.fail("behavior_policy", "expected 'uniform' or an explicit matrix")
        pb = np.full((n_s, n_a), 1.0 / n_a)
    else:
        pb = f.array("behavior_policy")
        if pb.shape != (n_s, n_a):
            f.fail("behavior_policy", f"expected shape {(n_s, n_a)}, got {pb.shape}")
        rows = pb.sum(axis=-1)
        if np.any(pb < 0) or np.any(np.abs(rows - 1.0) > 1e-12):
            p, ln = _worst_row_line(f, "behavior_policy", pb, rows)
            raise ConfigError("behavior_policy rows must be nonnegative and sum to 1",
                              field=p, line=ln)
    noise = f.number("reward_noise", 0.0)
    if noise < 0:
        f.fail("reward_noise", "must be nonnegative")
    name = str(f.get("name", Path(source).stem))
    return MdpModel(P, r, gamma, pb, noise, name=name)


def mdp_to_dict(m):
    pb = m.behavior_policy
    uniform = np.array_equal(pb, np.full(pb.shape, 1.0 / m.n_actions))
    out = {
        "name": m.name,
        "n_states": m.n_states,
        "n_actions": m.n_actions,
        "gamma": m.discount,
        "transition": float_list(m.transition),
        "reward": float_list(m.reward),
        "behavior_policy": "uniform" if uniform else float_list(pb),
    }
    if m.reward_noise > 0:
        out["reward_noise"] = m.reward_noise
    return out


def load_fixture_text(text, source="fixture"):
    data, lines = _load_yaml(text, source)
    return mdp_from_dict(data, lines, source)


def builtin_fixture_path(name):
    return resources.files("qclt") / "fixtures" / f"{name}.yaml"


def load_fixture(path):
    """Read a fixture file; ``builtin:<name>`` selects a packaged fixture."""
    path = str(path)
    if path.startswith("builtin:"):
        ref = builtin_fixture_path(path.split(":", 1)[1])
        if not ref.is_file():
            raise ConfigError(f"no packaged fixture named {path!r}", field="fixture")
        return load_fixture_text(ref.read_text(), path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read fixture {path}: {exc}", field="fixture") from exc
    return load_fixture_text(text, path)


class _Dumper(yaml.SafeDumper):
    """Safe dumper that also accepts numpy scalars and arrays."""


_Dumper.add_multi_representer(
    np.floating, lambda d, x: d.represent_float(float(x)))
_Dumper.add_multi_representer(
    np.integer, lambda d, x: d.represent_int(int(x)))
_Dumper.add_multi_representer(
    np.bool_, lambda d, x: d.represent_bool(bool(x)))
_Dumper.add_multi_representer(
    np.ndarray, lambda d, x: d.represent_list(x.tolist()))
_Dumper.add_representer(
    tuple, lambda d, x: d.represent_list(list(x)))


def _yaml_text(data):
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False, default_flow_style=None,
                     width=100)


def fixture_text(m, header=None):
    body = _yaml_text(mdp_to_dict(m))
    return (header + "\n" if header else "") + body


# --- experiment configuration -------------------------------------------------

DEFAULT_TOLERANCES = {
    "cov_rel": 0.15,
    "fclt_increment": 0.10,
    "fclt_cross": 0.05,
    "w1_slope": -0.10,
    "w1_residual": 0.30,
    "decay_slope": [-0.65, -0.35],
    "lag1_rel": 0.02,
}


def _beta_repr(beta):
    frac = Fraction(beta).limit_denominator(1000)
    if float(frac) == beta and frac.denominator != 1:
        return f"{frac.numerator}/{frac.denominator}"
    return beta


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; see ``to_dict`` for the file layout."""

    fixture_path: str
    schedule: StepsizeSchedule
    K_grid: tuple = (1000, 10000, 100000, 1000000)
    replicas: int = 2000
    zeta_grid: tuple = tuple(round(0.1 * i, 12) for i in range(1, 11))
    master_seed: int = 0
    track_sandwich: bool = False
    instrumented_terms: bool = False
    emit_samples: bool = False
    output_dir: str = None
    fclt_K: int = 100000
    checkpoints: tuple = (100, 1000, 10000, 100000)
    decay_replicas: int = 200
    diagnostic: bool = False
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    base_dir: str = field(default=".", compare=False)

    def resolved_fixture(self):
        if self.fixture_path.startswith("builtin:") or os.path.isabs(self.fixture_path):
            return self.fixture_path
        return os.path.join(self.base_dir, self.fixture_path)

    def load_mdp(self):
        return load_fixture(self.resolved_fixture())

    @property
    def clt_mode(self):
        return not self.diagnostic

    def to_dict(self):
        s = self.schedule
        return {
            "fixture": self.fixture_path,
            "schedule": {"alpha": s.alpha, "b": s.b, "beta": _beta_repr(s.beta)},
            "K_grid": [int(k) for k in self.K_grid],
            "replicas": int(self.replicas),
            "zeta_grid": [float(z) for z in self.zeta_grid],
            "master_seed": int(self.master_seed),
            "track_sandwich": self.track_sandwich,
            "instrumented_terms": self.instrumented_terms,
            "emit_samples": self.emit_samples,
            "output_dir": self.output_dir,
            "fclt_K": int(self.fclt_K),
            "checkpoints": [int(c) for c in self.checkpoints],
            "decay_replicas": int(self.decay_replicas),
            "diagnostic": self.diagnostic,
            "tolerances": dict(self.tolerances),
        }

    def to_yaml(self):
        return _yaml_text(self.to_dict())

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def config_hash(self, mdp=None):
        """sha256 over the canonical config plus the fixture contents.

        ``output_dir`` is excluded: it does not affect any reported number.
        """
        d = self.to_dict()
        d.pop("output_dir")
        try:
            m = self.load_mdp() if mdp is None else mdp
            d["fixture_contents"] = mdp_to_dict(m)
        except ConfigError:
            pass
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_from_dict(data, lines=None, base_dir="."):
    f = _Fields(data, lines or {})
    fixture = f.get("fixture", required=True)
    if not isinstance(fixture, str):
        f.fail("fixture", "expected a path string")
    sf = f.sub("schedule")
    alpha = sf.number("alpha", required=True)
    b = sf.number("b", required=True)
    beta = sf.number("beta", required=True)
    diagnostic = f.flag("diagnostic", False)
    try:
        sched = StepsizeSchedule(alpha, b, beta)
    except ConfigError as exc:
        msg = str(exc).split(" (")[0]
        if exc.field in (None, "schedule"):
            f.fail("schedule", msg)
        sf.fail(exc.field.split(".")[-1], msg)
    if not diagnostic and not sched.clt_admissible:
        sf.fail("beta", "CLT modes need beta in (0.5, 1); set diagnostic: true "
                        "for other schedules")

    def int_list(key, default):
        v = f.get(key, default)
        if not isinstance(v, (list, tuple)) or not v:
            f.fail(key, "expected a nonempty list")
        out = []
        for i, x in enumerate(v):
            if isinstance(x, float) and x.is_integer():
                x = int(x)
            if isinstance(x, bool) or not isinstance(x, int) or x < 1:
                raise ConfigError("expected positive integers",
                                  field=f"{f.path(key)}[{i}]",
                                  line=f.lines.get(f"{f.path(key)}[{i}]", f.line(key)))
            out.append(x)
        if sorted(set(out)) != out:
            f.fail(key, "must be strictly increasing")
        return tuple(out)

    K_grid = int_list("K_grid", list(ExperimentConfig.K_grid))
    checkpoints = int_list("checkpoints", list(ExperimentConfig.checkpoints))
    replicas = f.integer("replicas", 2000, minimum=1)
    zeta = f.get("zeta_grid", list(ExperimentConfig.zeta_grid))
    if not isinstance(zeta, list) or not zeta:
        f.fail("zeta_grid", "expected a nonempty list")
    try:
        zeta = tuple(float(Fraction(str(z))) if isinstance(z, str) else float(z)
                     for z in zeta)
    except (TypeError, ValueError):
        f.fail("zeta_grid", "expected numbers")
    if any(z < 0 or z > 1 for z in zeta) or any(b <= a for a, b in zip(zeta, zeta[1:])):
        f.fail("zeta_grid", "must be strictly ascending within [0, 1]")
    if zeta[-1] != 1.0:
        f.fail("zeta_grid", "must end at 1")
    seed = f.integer("master_seed", 0, minimum=0)
    if seed >= 2 ** 64:
        f.fail("master_seed", "must fit in 64 bits")
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(f.get("tolerances", {}) or {})
    out_dir = f.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        f.fail("output_dir", "expected a path string")
    return ExperimentConfig(
        fixture_path=fixture,
        schedule=sched,
        K_grid=K_grid,
        replicas=replicas,
        zeta_grid=zeta,
        master_seed=seed,
        track_sandwich=f.flag("track_sandwich"),
        instrumented_terms=f.flag("instrumented_terms"),
        emit_samples=f.flag("emit_samples"),
        output_dir=out_dir,
        fclt_K=f.integer("fclt_K", 100000, minimum=1),
        checkpoints=checkpoints,
        decay_replicas=f.integer("decay_replicas", 200, minimum=1),
        diagnostic=diagnostic,
        tolerances=tol,
        base_dir=base_dir,
    )


def parse_config(text, source="config", base_dir="."):
    data, lines = _load_yaml(text, source)
    return config_from_dict(data, lines, base_dir)


def load_config(path):
    path = str(path)
    if path.startswith("builtin:"):
        ref = builtin_fixture_path(path.split(":", 1)[1])
        if not ref.is_file():
            raise ConfigError(f"no packaged config named {path!r}", field="config")
        return parse_config(ref.read_text(), path, base_dir=".")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", field="config") from exc
    return parse_config(text, path, base_dir=str(Path(path).resolve().parent))


def resolve_output_dir(config_dir=None):
    """Explicit directory, then ``$QCLT_OUTPUT_DIR``, then ``./qclt_output``."""
    out = config_dir or os.environ.get("QCLT_OUTPUT_DIR") or "qclt_output"
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}",
                          field="output_dir") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable", field="output_dir")
    return path


# --- writers ------------------------------------------------------------------

def header_line(config_hash):
    return f"# qclt {__version__} config={config_hash}"


def write_text(path, text, config_hash):
    Path(path).write_text(header_line(config_hash) + "\n" + text)


def write_yaml(path, data, config_hash):
    write_text(path, _yaml_text(data), config_hash)


def read_yaml(path):
    """Load a YAML result file written by :func:`write_yaml` (header skipped)."""
    return yaml.safe_load(Path(path).read_text())


def write_csv(path, columns, rows, config_hash):
    buf = _io.StringIO()
    buf.write(header_line(config_hash) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(x) if isinstance(x, (float, np.floating)) else x
                    for x in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def checkpoint_rows(record, q_star):
    rows = []
    for k, Q in zip(record.checkpoints, record.iterates_kept):
        err = float(np.max(np.abs(Q - q_star)))
        rows.append([int(k), err] + [float(x) for x in np.ravel(Q)])
    return rows


def write_checkpoints(path, record, q_star, config_hash):
    d = np.size(q_star)
    cols = ["k", "sup_error"] + [f"q_{i}" for i in range(d)]
    write_csv(path, cols, checkpoint_rows(record, q_star), config_hash)


def write_phi(path, record, config_hash, replica_column=False, records=None):
    """Phi records ``(zeta, coordinate_index, value)``; several replicas may be
    stacked with a leading ``replica`` column."""
    recs = [record] if records is None else records
    rows = []
    for r in recs:
        for z, v in zip(r.zeta_grid, r.phi):
            for i, x in enumerate(np.ravel(v)):
                row = [float(z), i, float(x)]
                rows.append([r.replica] + row if replica_column else row)
    cols = ["zeta", "coordinate_index", "value"]
    write_csv(path, (["replica"] + cols) if replica_column else cols, rows, config_hash)


def write_oracle_dump(path, oracle, config_hash):
    write_yaml(path, oracle.to_dict(), config_hash)


def read_oracle_dump(path, mdp, chain=None):
    from .oracle import TheoryOracle
    return TheoryOracle.from_dict(read_yaml(path), mdp, chain)


# --- random MDP generation ----------------------------------------------------

@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int
    n_actions: int
    sparsity: float = 1.0
    reward_seed: int = 0
    transition_seed: int = 0
    gamma: float = 0.9
    behavior: object = "uniform"

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ConfigError("n_states and n_actions must be positive", field="n_states")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError("sparsity must lie in (0, 1]", field="sparsity")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)", field="gamma")


def _draw_mdp(spec, attempt):
    n_s, n_a = spec.n_states, spec.n_actions
    rng_p = replica_rng(spec.transition_seed, attempt, stream="fixture")
    rng_r = replica_rng(spec.reward_seed, attempt + MAX_REGENERATIONS, stream="fixture")
    n_support = max(1, int(np.ceil(spec.sparsity * n_s)))
    P = np.zeros((n_s, n_a, n_s))
    for s in range(n_s):
        for a in range(n_a):
            support = rng_p.choice(n_s, size=n_support, replace=False)
            P[s, a, support] = rng_p.dirichlet(np.ones(n_support))
    # exact unit row sums after rounding
    P /= P.sum(axis=-1, keepdims=True)
    r = rng_r.uniform(0.0, 1.0, size=(n_s, n_a))
    if isinstance(spec.behavior, str):
        if spec.behavior != "uniform":
            raise ConfigError("behavior must be 'uniform' or a matrix", field="behavior")
        pb = np.full((n_s, n_a), 1.0 / n_a)
    else:
        pb = np.asarray(spec.behavior, dtype=np.float64)
    return MdpModel(P, r, spec.gamma, pb,
                    name=f"random_{n_s}x{n_a}_t{spec.transition_seed}_r{spec.reward_seed}")


def generate_mdp(spec):
    """Random MDP whose joint chain is irreducible and aperiodic.

    Draws are keyed by ``(seed, attempt)``; up to 100 attempts are made.
    """
    last = None
    for attempt in range(MAX_REGENERATIONS):
        m = _draw_mdp(spec, attempt)
        try:
            build_joint_chain(m)
        except AssumptionViolation as exc:
            last = exc
            continue
        return m
    raise AssumptionViolation(
        f"no valid MDP after {MAX_REGENERATIONS} attempts: {last}",
        getattr(last, "violating_class", None))


def spec_from_dict(data, lines=None):
    f = _Fields(data, lines or {})
    beh = f.get("behavior", "uniform")
    return RandomMdpSpec(
        n_states=f.integer("n_states", required=True, minimum=1),
        n_actions=f.integer("n_actions", required=True, minimum=1),
        sparsity=f.number("sparsity", 1.0),
        reward_seed=f.integer("reward_seed", 0, minimum=0),
        transition_seed=f.integer("transition_seed", 0, minimum=0),
        gamma=f.number("gamma", 0.9),
        behavior=beh,
    )


def load_spec(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read generator spec {path}: {exc}", field="spec") from exc
    data, lines = _load_yaml(text, str(path))
    return spec_from_dict(data, lines)


__all__ = [
    "ExperimentConfig", "RandomMdpSpec", "STREAMS", "float_list", "generate_mdp",
    "load_config", "load_fixture", "parse_config", "resolve_output_dir",
]
