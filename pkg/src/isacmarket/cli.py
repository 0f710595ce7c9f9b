"""Command-line driver: scenario generation, experiment runs, sweeps over
user counts and overbooking rates, property audits, and report rendering.

Exit codes: 0 success, 1 property failure, 2 input error. All outputs are
deterministic functions of the configuration and seeds except the timing
column.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .harness import (
    IngestionError,
    Scenario,
    ScenarioConfig,
    STRATEGIES,
    default_match_config,
    default_online_config,
    gen_synthetic,
    load_eua,
    load_scenario,
    metric_rows,
    monte_carlo_outcomes,
    offline_phase,
    offline_phases,
    offline_variant_key,
    resolve_strategy,
    save_scenario,
    strategy_market,
    read_results,
    summarize_rows,
    write_results,
    METRIC_FIELDS,
)
from .market import (
    CommContract,
    Expectations,
    RiskThresholds,
    ResourceGrids,
    SensingContract,
    check_feasibility,
    expect_beta,
)
from .offline import (
    MatchConfig,
    ProbeBudgetError,
    check_coalition_stability,
    check_individual_rationality,
    client_requirements,
    find_blocking_pairs,
    local_pareto_probe,
)
from .values import ValueWeights

SEED_ENV = "ISACMARKET_SEED"

_INT_KEYS = ("n_mus", "n_bss", "n_targets")
_FLOAT_KEYS = ("area_m", "overbook", "b0")
_INT_RANGE_KEYS = ("n_tx_range", "n_rx_range")
_FLOAT_RANGE_KEYS = ("bandwidth_mhz", "power_dbw", "rate_req_range",
                     "sensing_req_range", "part_range")
_OMEGA_KEYS = ("omega1", "omega2", "omega3", "omega4", "omega5")
_RHO_KEYS = ("rho1", "rho2", "rho3", "rho4")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group(
        "scenario parameters",
        "precedence: flag > config file > built-in default; the master seed "
        f"additionally falls back to ${SEED_ENV}")
    g.add_argument("--config", metavar="FILE",
                   help="JSON document of scenario parameters (same keys as "
                        "the flags, underscores instead of dashes)")
    for key in _INT_KEYS:
        g.add_argument(_flag(key), type=int, dest=key)
    for key in _FLOAT_KEYS:
        g.add_argument(_flag(key), type=float, dest=key)
    for key in _INT_RANGE_KEYS:
        g.add_argument(_flag(key), type=int, nargs=2, metavar=("LO", "HI"),
                       dest=key)
    for key in _FLOAT_RANGE_KEYS:
        g.add_argument(_flag(key), type=float, nargs=2, metavar=("LO", "HI"),
                       dest=key)
    for key in _OMEGA_KEYS + _RHO_KEYS:
        g.add_argument(_flag(key), type=float, dest=key)
    g.add_argument("--bandwidth-sub", type=_int_list, dest="bandwidth_sub",
                   metavar="N1,N2,...", help="subchannel grid")
    g.add_argument("--power-w", type=_float_list, dest="power_w",
                   metavar="P1,P2,...", help="power grid in watts")
    g.add_argument("--seed", type=int, dest="seed")


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario source")
    g.add_argument("--scenario", metavar="FILE",
                   help="saved scenario document (overrides generation)")
    g.add_argument("--eua-bs", metavar="FILE",
                   help="station latitude/longitude table")
    g.add_argument("--eua-users", metavar="FILE",
                   help="user latitude/longitude table")


def _build_config(args: argparse.Namespace) -> ScenarioConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)

    def pick(key):
        val = getattr(args, key, None)
        return doc.get(key) if val is None else val

    kwargs: dict = {}
    for key in _INT_KEYS + _FLOAT_KEYS:
        val = pick(key)
        if val is not None:
            kwargs[key] = val
    for key in _INT_RANGE_KEYS + _FLOAT_RANGE_KEYS:
        val = pick(key)
        if val is not None:
            kwargs[key] = tuple(val)
    if kwargs.get("n_mus") is None:
        raise ValueError("n_mus is required (flag --n-mus or config file)")

    omegas = {k: pick(k) for k in _OMEGA_KEYS}
    if any(v is not None for v in omegas.values()):
        base = asdict(ScenarioConfig(n_mus=1).weights)
        base.update({k: v for k, v in omegas.items() if v is not None})
        kwargs["weights"] = ValueWeights(**base)
    rhos = {k: pick(k) for k in _RHO_KEYS}
    if any(v is not None for v in rhos.values()):
        base = asdict(ScenarioConfig(n_mus=1).thresholds)
        base.update({k: v for k, v in rhos.items() if v is not None})
        kwargs["thresholds"] = RiskThresholds(**base)
    sub, pw = pick("bandwidth_sub"), pick("power_w")
    if sub is not None or pw is not None:
        grids = ScenarioConfig(n_mus=1).grids
        kwargs["grids"] = ResourceGrids(
            bandwidth_sub=tuple(sub) if sub is not None else grids.bandwidth_sub,
            power_w=tuple(pw) if pw is not None else grids.power_w)

    seed = getattr(args, "seed", None)
    if seed is None and SEED_ENV in os.environ:
        seed = int(os.environ[SEED_ENV])
    if seed is None:
        seed = doc.get("seed")
    if seed is not None:
        kwargs["seed"] = seed
    return ScenarioConfig(**kwargs)


def _resolve_scenario(args: argparse.Namespace) -> tuple[Scenario, dict]:
    """The scenario named by the source flags plus its metadata stanza."""
    if getattr(args, "scenario", None):
        sc = load_scenario(args.scenario)
        return sc, {"scenario_file": args.scenario}
    if bool(getattr(args, "eua_bs", None)) != bool(getattr(args, "eua_users", None)):
        raise ValueError("EUA ingestion needs both --eua-bs and --eua-users")
    cfg = _build_config(args)
    if getattr(args, "eua_bs", None):
        sc = load_eua(args.eua_bs, args.eua_users, cfg,
                      np.random.default_rng(cfg.seed))
        meta = {"eua_bs": args.eua_bs, "eua_users": args.eua_users}
    else:
        sc = gen_synthetic(cfg, np.random.default_rng(cfg.seed))
        meta = {}
    meta["scenario_config"] = _config_doc(cfg)
    return sc, meta


def _config_doc(cfg: ScenarioConfig) -> dict:
    doc = asdict(cfg)
    doc["weights"] = asdict(cfg.weights)
    doc["thresholds"] = asdict(cfg.thresholds)
    doc["grids"] = {"bandwidth_sub": list(cfg.grids.bandwidth_sub),
                    "power_w": list(cfg.grids.power_w)}
    return doc


def _parse_strategies(text: str) -> list[str]:
    names = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not names:
        raise ValueError("need at least one strategy")
    for name in names:
        resolve_strategy(name)
    return names


def _write_meta(out_dir: str, doc: dict) -> None:
    doc = {"package": "isacmarket", "version": __version__,
           "python": sys.version.split()[0],
           "numpy": np.__version__,
           "seed_env_var": SEED_ENV,
           "trial_streams": "PCG64(SeedSequence([scenario seed, trial])), "
                            "shared across strategies so draws are paired",
           "ecibc_unit": "watt_seconds (sender power times interaction "
                         "delay, summed over interactions)",
           **doc}
    with open(os.path.join(out_dir, "run_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _trace_record(outcome) -> dict:
    o = outcome
    return {
        "strategy": o.strategy, "trial": o.trial,
        "alpha": {str(k): v for k, v in o.realization.alpha.items()},
        "beta": {str(k): v for k, v in o.realization.beta.items()},
        "volunteers_c": sorted(map(list, o.realization.volunteers_c)),
        "volunteers_s": sorted(map(list, o.realization.volunteers_s)),
        "n_comm": len(o.comm_contracts), "n_sense": len(o.sensing_contracts),
        "n_temp": len(o.temp_contracts),
        "ni_to_bs": o.ni_to_bs, "ni_to_client": o.ni_to_client,
        "n_failed": o.n_failed, "n_contracted": o.n_contracted,
        "served_value": o.served_value, "power_cost": o.power_cost,
        "mu_utility": o.mu_utility, "bs_utility": o.bs_utility,
        "social_welfare": o.social_welfare,
        "rdslc_b": o.rdslc_b, "rdslc_p": o.rdslc_p, "rt_ms": o.rt_ms,
    }


def _write_traces(out_dir: str, outcomes) -> None:
    trace_dir = os.path.join(out_dir, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    by_strategy: dict[str, list] = {}
    for o in outcomes:
        by_strategy.setdefault(o.strategy, []).append(o)
    for name, group in by_strategy.items():
        path = os.path.join(trace_dir, f"{name}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for o in group:
                fh.write(json.dumps(_trace_record(o), sort_keys=True) + "\n")


def _write_contracts(out_dir: str, scenario: Scenario, names, phases) -> None:
    cdir = os.path.join(out_dir, "contracts")
    os.makedirs(cdir, exist_ok=True)
    for name in names:
        key = offline_variant_key(name)
        if key is None:
            continue
        result = phases[key]
        doc = {
            "strategy": name, "scenario_id": scenario.label,
            "comm": [asdict(c) for c in result.comm_contracts],
            "sensing": [asdict(s) for s in result.sensing_contracts],
        }
        with open(os.path.join(cdir, f"{name}.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def cmd_gen(args: argparse.Namespace) -> int:
    sc, _meta = _resolve_scenario(args)
    save_scenario(sc, args.out)
    print(f"wrote {args.out} ({sc.label}: {sc.n_bss} stations, "
          f"{sc.n_mus} users)")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    names = _parse_strategies(args.strategies)
    if args.trials < 1:
        raise ValueError("trials must be >= 1")
    sc, meta = _resolve_scenario(args)
    os.makedirs(args.out_dir, exist_ok=True)
    phases = offline_phases(sc, names, default_match_config())
    outcomes = monte_carlo_outcomes(sc, names, args.trials,
                                    online_cfg=default_online_config(),
                                    priors=phases)
    rows = metric_rows(sc, outcomes)
    results = os.path.join(args.out_dir, "results.csv")
    write_results(results, rows)
    _write_traces(args.out_dir, outcomes)
    _write_contracts(args.out_dir, sc, names, phases)
    _write_meta(args.out_dir, {
        "command": "run", "strategies": names, "n_trials": args.trials,
        "scenario_id": sc.label, "master_seed": sc.seed, **meta})
    print(f"wrote {results} ({len(rows)} rows), traces/, contracts/, "
          "run_meta.json")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    names = _parse_strategies(args.strategies)
    if args.trials < 1:
        raise ValueError("trials must be >= 1")
    if getattr(args, "scenario", None):
        raise ValueError("sweeps build scenarios from parameters; "
                         "--scenario cannot be swept")
    values = args.values
    if not values:
        raise ValueError("sweep axis is empty")
    if args.axis == "n_mus" and getattr(args, "n_mus", None) is None:
        args.n_mus = int(values[0])
    base = _build_config(args)
    rows = []
    labels = []
    for v in values:
        if args.axis == "n_mus":
            cfg = replace(base, n_mus=int(v))
        else:
            cfg = replace(base, overbook=float(v))
        rng = np.random.default_rng(cfg.seed)
        if getattr(args, "eua_bs", None):
            sc = load_eua(args.eua_bs, args.eua_users, cfg, rng)
        else:
            sc = gen_synthetic(cfg, rng)
        labels.append(sc.label)
        outcomes = monte_carlo_outcomes(sc, names, args.trials,
                                        match_cfg=default_match_config(),
                                        online_cfg=default_online_config())
        for row in metric_rows(sc, outcomes):
            row["overbook"] = cfg.overbook
            rows.append(row)
    os.makedirs(args.out_dir, exist_ok=True)
    results = os.path.join(args.out_dir, "results.csv")
    write_results(results, rows, extra_columns=("overbook",))
    _write_meta(args.out_dir, {
        "command": "sweep", "axis": args.axis,
        "values": list(values), "strategies": names,
        "n_trials": args.trials, "scenario_ids": labels,
        "scenario_config": _config_doc(base)})
    print(f"wrote {results} ({len(rows)} rows over {len(values)} "
          f"{args.axis} points), run_meta.json")
    return 0


def _load_contract_file(path: str):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    comm = [CommContract(**c) for c in doc.get("comm", [])]
    sensing = [SensingContract(**s) for s in doc.get("sensing", [])]
    return doc.get("strategy", "frbank"), comm, sensing


def cmd_verify(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    failures = 0

    def report(prop: str, problems) -> None:
        nonlocal failures
        if problems:
            failures += len(problems)
            print(f"FAIL {prop}: {len(problems)} violation(s)")
            for p in problems:
                print(f"  {p}")
        else:
            print(f"PASS {prop}")

    if args.contracts:
        name, comm, sensing = _load_contract_file(args.contracts)
        market = strategy_market(sc, name)
        exp = Expectations(
            e_alpha={u.id: u.part_prob for u in market.users},
            e_beta={c.id: expect_beta(c, market.users)
                    for c in market.coalitions})
        found = check_feasibility(market, comm, sensing, exp,
                                  requirements=client_requirements(market))
        report("contract-audit",
               [f"{v.constraint} {v.entity}: {v.detail}" for v in found])
        return 1 if failures else 0

    if offline_variant_key(args.strategy) is None:
        raise ValueError(f"{args.strategy} signs no long-term contracts; "
                         "nothing to audit")
    result = offline_phase(sc, args.strategy,
                           MatchConfig(pel_s_frac=1.0))
    ir = check_individual_rationality(result)
    report("individual-rationality",
           [f"{v.constraint} {v.entity}: {v.detail}" for v in ir])
    pairs = find_blocking_pairs(result, "both",
                                evict_limit=args.evict_limit,
                                budget=args.budget)
    report("blocking-pairs",
           [f"{p.kind} {p.client} -> bs {p.bs_id} (gain {p.client_gain:.3g})"
            for p in pairs])
    coal = check_coalition_stability(result, evict_limit=args.evict_limit,
                                     budget=args.budget)
    report("coalition-stability",
           [f"{v.constraint} {v.entity}: {v.detail}" for v in coal])
    pareto = local_pareto_probe(result, budget=args.budget)
    if pareto.partial and not pareto.moves:
        raise ProbeBudgetError("pareto probe exhausted its budget before "
                               "finding a certificate either way")
    report("local-pareto" + (" (partial)" if pareto.partial else ""),
           [f"{m.client} -> bs {m.bs_id} (welfare +{m.sw_gain:.3g})"
            for m in pareto.moves])
    if not result.certified:
        report("convergence-certificate", ["matching left uncertified"])
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    import matplotlib
    matplotlib.use("Agg")
    # fixed salt keeps generated element ids, and so file bytes, stable
    matplotlib.rcParams["svg.hashsalt"] = "isacmarket"
    import matplotlib.pyplot as plt

    rows = []
    for path in args.results:
        rows.extend(read_results(path))
    if not rows:
        raise ValueError("results are empty")
    os.makedirs(args.out_dir, exist_ok=True)

    has_overbook = "overbook" in rows[0]
    x_key = "overbook" if (has_overbook and len(
        {r["overbook"] for r in rows}) > 1) else "n_mus"
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r[x_key]), []).append(r)

    summary_path = os.path.join(args.out_dir, "summary.csv")
    strategies = sorted({k[0] for k in groups})
    xs = sorted({k[1] for k in groups})
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        import csv as _csv
        cols = ["strategy", x_key, "n_trials"]
        for metric in METRIC_FIELDS:
            cols += [f"{metric}_mean", f"{metric}_se"]
        wtr = _csv.DictWriter(fh, fieldnames=cols)
        wtr.writeheader()
        for name in strategies:
            for x in xs:
                group = groups.get((name, x))
                if not group:
                    continue
                rep = summarize_rows(group)
                row = {"strategy": name, x_key: x,
                       "n_trials": rep.trials[name]}
                for metric in METRIC_FIELDS:
                    row[f"{metric}_mean"] = rep.means[name][metric]
                    row[f"{metric}_se"] = rep.ses[name][metric]
                wtr.writerow(row)

    def series(name: str, metric: str):
        pts = [(x, np.mean([float(r[metric]) for r in groups[(name, x)]]))
               for x in xs if (name, x) in groups]
        return [p[0] for p in pts], [p[1] for p in pts]

    def render(metric: str, *, log: bool, fname: str, ylabel: str) -> str:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for name in strategies:
            px, py = series(name, metric)
            if len(px) > 1:
                ax.plot(px, py, marker="o", label=name)
            else:
                ax.bar([f"{name}"], py, label=name)
        if log:
            ax.set_yscale("log")
        ax.set_xlabel(x_key)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        out = os.path.join(args.out_dir, f"{fname}.{args.format}")
        fig.tight_layout()
        # strip the creation date so re-rendering is byte-identical
        fig.savefig(out, metadata={"Date": None})
        plt.close(fig)
        return out

    written = [summary_path,
               render("social_welfare", log=False, fname="social_welfare",
                      ylabel="social welfare"),
               render("ni", log=True, fname="interactions", ylabel="NI"),
               render("rt_ms", log=True, fname="runtime", ylabel="RT (ms)"),
               render("rdslc_b", log=False, fname="demand_supply_ratio",
                      ylabel="RDSLC (bandwidth)"),
               render("drlc", log=False, fname="default_rate",
                      ylabel="DRLC")]
    print("wrote " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="isacmarket",
        description="Offline/online resource-trading simulator for "
                    "integrated sensing and communication markets.",
        epilog=f"Master seed precedence: --seed, then ${SEED_ENV}, then the "
               "config file, then 0. Exit codes: 0 ok, 1 property failure, "
               "2 input error.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate and save a scenario")
    _add_source_flags(g)
    _add_scenario_flags(g)
    g.add_argument("--out", required=True, metavar="FILE")
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="Monte-Carlo experiment on one scenario")
    _add_source_flags(r)
    _add_scenario_flags(r)
    r.add_argument("--strategies", default="frbank,con_online,con_offline,"
                   "hybrid,hybrid_o,greedy",
                   help="comma-separated subset of: " + ",".join(STRATEGIES))
    r.add_argument("--trials", type=int, default=100)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="repeat an experiment over an axis")
    _add_source_flags(s)
    _add_scenario_flags(s)
    s.add_argument("--axis", choices=("n_mus", "overbook"), required=True)
    s.add_argument("--values", type=_float_list, required=True,
                   metavar="V1,V2,...")
    s.add_argument("--strategies", default="frbank,con_online,con_offline,"
                   "hybrid,hybrid_o,greedy")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_sweep)

    v = sub.add_parser("verify",
                       help="audit matching properties at desk scale")
    v.add_argument("--scenario", required=True, metavar="FILE")
    v.add_argument("--contracts", metavar="FILE",
                   help="audit a saved contract book instead of re-matching")
    v.add_argument("--strategy", default="frbank",
                   help="offline variant to match and audit")
    v.add_argument("--evict-limit", type=int, default=None)
    v.add_argument("--budget", type=int, default=5_000_000)
    v.set_defaults(fn=cmd_verify)

    rep = sub.add_parser("report",
                         help="summary table and quick-look figures")
    rep.add_argument("--results", nargs="+", required=True, metavar="FILE")
    rep.add_argument("--out-dir", required=True)
    rep.add_argument("--format", choices=("svg", "png"), default="svg")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ProbeBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, ValueError, OSError,
            json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
