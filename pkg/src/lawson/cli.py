"""Command-line front end: surface, jacobi, toda, assemble, morse, audit."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, LawsonError

AUDIT_SCHEMA = "audit_v1"
BRANCHES = {"minus": "sigma_minus", "plus": "sigma_plus",
            "sigma_minus": "sigma_minus", "sigma_plus": "sigma_plus"}


@dataclass
class RunConfig:
    m: int = 4
    n: int = 4
    branch: str = "minus"
    k: int = 2
    epsilon: float = 0.05
    delta: float | None = None
    gamma: float | None = None
    l: int = 2
    h: float = 1e-2
    s_max: float = 100.0
    t_max: float = 12.0
    toda_s_max: float = 1e3
    tol_scale: float = 1.0
    out: str = "out"
    skip_morse: bool = False
    sigmas: list = field(default_factory=lambda: [10.0, 20.0, 40.0])
    k_values: list = field(default_factory=lambda: [10, 15, 20, 30, 40])
    lifted_k: list = field(default_factory=lambda: [15, 25])
    criteria: list = field(default_factory=lambda: list(range(1, 11)))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError("unknown configuration keys", keys=sorted(unknown))
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        # nested sections are flattened: {surface: {m: 4}} == {m: 4}
        flat = {}
        for key, val in data.items():
            if isinstance(val, dict):
                flat.update(val)
            else:
                flat[key] = val
        return cls.from_dict(flat)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.m, self.n)

    @property
    def branch_name(self) -> str:
        try:
            return BRANCHES[self.branch]
        except KeyError:
            raise ConfigError("branch must be plus or minus", branch=self.branch) from None

    def content_hash(self) -> str:
        blob = json.dumps({"config": self.to_dict(), "version": __version__}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# -- helpers -------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    return str(o)


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _outdir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _report(cfg: RunConfig, command: str, body: dict) -> dict:
    return {"command": command, "hash": cfg.content_hash(), "version": __version__,
            "config": cfg.to_dict(), **body}


def _profile(cfg: RunConfig, s_max: float | None = None):
    from .surface import profile
    return profile(cfg.dims, cfg.branch_name, h=cfg.h, s_max=cfg.s_max if s_max is None else s_max)


def _stack(cfg: RunConfig, prof, *, delta=None, gamma=None, s_max=None):
    from .toda import A_STAR, TodaConfig, TodaGrid, approx_solution, newton_solve
    tc = TodaConfig(k=cfg.k, delta=cfg.delta if delta is None else delta,
                    gamma_coupling=(gamma if gamma is not None
                                    else cfg.gamma if cfg.gamma is not None else A_STAR),
                    l=cfg.l)
    grid = TodaGrid.build(s_max=cfg.toda_s_max if s_max is None else s_max)
    return newton_solve(prof, tc, approx_solution(prof, tc, grid=grid))


# -- commands ------------------------------------------------------------------

def cmd_surface(cfg: RunConfig) -> dict:
    from .phase_plane import equilibria, equilibria_to_json, orbit_to_csv, shoot_heteroclinic
    from .surface import minimality_residual, profile_to_csv, reconstruct_profile
    out = _outdir(cfg)
    orbit = shoot_heteroclinic(cfg.dims[::-1], cfg.branch_name)
    prof = reconstruct_profile(orbit, cfg.dims, h=cfg.h, s_max=cfg.s_max)
    orbit_to_csv(orbit, out / "orbit.csv")
    profile_to_csv(prof, out / "profile.csv")
    (out / "equilibria.json").write_text(equilibria_to_json(equilibria(cfg.dims)))
    body = {
        "minimality_residual": minimality_residual(prof),
        "endpoint_distance": orbit.endpoint_distance,
        "u_monotone": bool(orbit.u_monotone),
        "monotonicity_violations": int(len(orbit.monotonicity_violations)),
        "support_sign": int(np.sign(np.median(prof.support))),
        "min_distance": float(np.min(np.hypot(prof.a, prof.b))),
    }
    rep = _report(cfg, "surface", body)
    write_json(out / "surface_report.json", rep)
    return rep


def cmd_jacobi(cfg: RunConfig) -> dict:
    from .jacobi import (emden_fowler, emden_fowler_to_csv, field_to_csv, jacobi_minus,
                         jacobi_plus, jacobi_residual, stability_check)
    out = _outdir(cfg)
    prof = _profile(cfg)
    vp = jacobi_plus(prof)
    vm = jacobi_minus(prof, vp)
    ef = emden_fowler(prof)
    field_to_csv(vp, out / "jacobi_plus.csv")
    field_to_csv(vm, out / "jacobi_minus.csv")
    emden_fowler_to_csv(ef, out / "emden_fowler.csv")
    stab = stability_check(prof)
    body = {"plus_exponent": vp.fitted_exponent, "minus_exponent": vm.fitted_exponent,
            "minus_head_exponent": vm.head_exponent, "wronskian_spread": vm.wronskian_spread,
            "residual_plus": jacobi_residual(prof, vp),
            "emden_fowler_identity": ef.identity_defect(),
            "stability_min_normalized_Q": stab["min_normalized_Q"]}
    rep = _report(cfg, "jacobi", body)
    write_json(out / "jacobi_report.json", rep)
    return rep


def cmd_toda(cfg: RunConfig) -> dict:
    from .toda import solve_report, stack_to_csv
    out = _outdir(cfg)
    if cfg.delta is None:
        raise ConfigError("toda needs --delta")
    prof = _profile(cfg)
    st = _stack(cfg, prof)
    stack_to_csv(st, out / "layers.csv")
    body = solve_report(st)
    body["residual"] = st.report["residual_history"][-1]
    rep = _report(cfg, "toda", body)
    write_json(out / "toda_report.json", rep)
    return rep


def _assemble(cfg: RunConfig, *, glue: bool = True, toda_s_max: float | None = None):
    from .allen_cahn import fermi_assemble, profile_kit
    from .toda import A_STAR
    eps = cfg.epsilon
    prof = _profile(cfg, s_max=max(cfg.s_max, 1100.0))
    st = _stack(cfg, prof, delta=eps**2, gamma=A_STAR, s_max=toda_s_max)
    extra = {"global_box": 60.0, "global_n": 61} if glue else {}
    return prof, fermi_assemble(prof, st, eps, kit=profile_kit(T=cfg.t_max), glue=glue, **extra)


def cmd_assemble(cfg: RunConfig) -> dict:
    from .allen_cahn import field_to_csv, global_to_csv, projection, residual_eval
    out = _outdir(cfg)
    _, fld = _assemble(cfg)
    for l in range(1, fld.k + 1):
        field_to_csv(fld, out / f"field_layer{l}.csv", l)
    if fld.global_samples is not None:
        global_to_csv(fld.global_samples, out / "global.csv")
    res = [residual_eval(fld, l) for l in range(1, fld.k + 1)]
    proj = [projection(fld, l) for l in range(1, fld.k + 1)]
    body = {"checks": fld.checks,
            "max_remainder": [r["max_remainder"] for r in res],
            "sup_P_over_c_star": [p["sup_P_over_c_star"] for p in proj],
            "tracking_error": [p["tracking_error"] for p in proj]}
    rep = _report(cfg, "assemble", body)
    write_json(out / "assemble_report.json", rep)
    return rep


def cmd_morse(cfg: RunConfig) -> dict:
    from .morse import (form_ratio, lifted_rayleigh, morse_report, scan_negativity,
                        sigma_tilde)
    from .toda import A_STAR
    out = _outdir(cfg)
    prof, fld = _assemble(cfg, glue=False, toda_s_max=1e8)
    scans = [scan_negativity(prof, s, cfg.k_values) for s in cfg.sigmas]
    st = sigma_tilde(cfg.epsilon, prof, A_STAR)
    lifted = [lifted_rayleigh(fld, prof, st["sigma_tilde"], k) for k in cfg.lifted_k]
    records = [morse_report(row) for sc in scans for row in sc["rows"]]
    records += [morse_report(form_ratio(prof, st["sigma_tilde"], lf["k_index"]), lf)
                for lf in lifted]
    body = {"sigma_tilde": st, "scans": scans, "lifted": lifted, "records": records}
    rep = _report(cfg, "morse", body)
    write_json(out / "morse_report.json", rep)
    return rep


def cmd_audit(cfg: RunConfig) -> tuple[dict, int]:
    """Run the pipeline stages and the acceptance criteria; errors are
    recorded and the artifacts written so far are kept."""
    from .acceptance import run_criterion
    out = _outdir(cfg)
    stages: dict = {}
    errors = []
    steps = [("surface", cmd_surface), ("jacobi", cmd_jacobi), ("assemble", cmd_assemble)]
    if not cfg.skip_morse:
        steps.append(("morse", cmd_morse))
    for name, fn in steps:
        try:
            stages[name] = {"status": "ok", "report": f"{name}_report.json"}
            fn(cfg)
        except LawsonError as exc:
            stages[name] = {"status": "error"}
            errors.append({"stage": name, **exc.record()})
            if name == "assemble":
                break
    crit = [] if errors else [c.to_dict() for i in cfg.criteria
                              if not (cfg.skip_morse and i == 10)
                              for c in run_criterion(i, cfg.tol_scale)]
    audit = {"schema": AUDIT_SCHEMA, "hash": cfg.content_hash(), "version": __version__,
             "config": cfg.to_dict(), "stages": stages, "errors": errors, "criteria": crit,
             "summary": {"passed": sum(c["passed"] for c in crit),
                         "failed": sum(not c["passed"] for c in crit)}}
    if cfg.skip_morse:
        audit["morse"] = "skipped"
    write_json(out / "audit.json", audit)
    code = errors[0]["exit_code"] if errors else 0
    return audit, code


COMMANDS = {"surface": cmd_surface, "jacobi": cmd_jacobi, "toda": cmd_toda,
            "assemble": cmd_assemble, "morse": cmd_morse}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--tol-scale", dest="tol_scale", type=float)
    common.add_argument("--m", type=int)
    common.add_argument("--n", type=int)
    common.add_argument("--branch", choices=sorted(BRANCHES))
    common.add_argument("--k", type=int, help="number of layers")
    common.add_argument("--delta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--l", type=int, help="recursion depth")
    common.add_argument("--epsilon", type=float)
    common.add_argument("--h", type=float)
    common.add_argument("--s-max", dest="s_max", type=float)
    common.add_argument("--skip-morse", dest="skip_morse", action="store_const", const=True)
    common.add_argument("--criteria", type=lambda s: [int(x) for x in s.split(",")])
    parser = argparse.ArgumentParser(prog="lawson", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("surface", "jacobi", "toda", "assemble", "morse", "audit"):
        sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: v for k, v in vars(args).items()
            if k not in ("config", "command") and v is not None}
    return dataclasses.replace(cfg, **over)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        from .phase_plane import DimensionPair
        DimensionPair(cfg.m, cfg.n)
        if args.command == "audit":
            audit, code = cmd_audit(cfg)
            s = audit["summary"]
            print(f"audit: {s['passed']} passed, {s['failed']} failed, "
                  f"{len(audit['errors'])} errors -> {Path(cfg.out) / 'audit.json'}")
            return code
        rep = COMMANDS[args.command](cfg)
        print(json.dumps({k: v for k, v in rep.items() if k not in ("config",)},
                         sort_keys=True, default=_json_default)[:2000])
        return 0
    except LawsonError as exc:
        print(json.dumps(exc.record(), default=_json_default), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
