"""Command line interface: run scenarios, sweep crash points, benchmark rounds."""

from __future__ import annotations

import json
import os
import sys

import click

from dotsim import harness, report as report_mod
from dotsim.errors import ScenarioInvalid


def _load(path: str, seed, backend, ledger, oracle) -> dict:
    try:
        scenario = harness.load_scenario(path)
    except ScenarioInvalid as exc:
        raise click.ClickException("invalid scenario: %s" % exc)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(str(exc))
    if seed is not None:
        scenario["seed"] = seed
    if backend is not None:
        if backend == "tee":
            scenario["backend"] = {"kind": "tee"}
        else:
            scenario["backend"] = {"kind": "dtc",
                                   "n": scenario["backend"].get("n", 4),
                                   "t": scenario["backend"].get("t", 3)}
    if ledger is not None:
        scenario["ledger"] = ledger
    if oracle:
        scenario["oracle"] = True
    return scenario


seed_opt = click.option("--seed", type=int, default=None, help="Override the scenario seed.")
backend_opt = click.option("--backend", type=click.Choice(["tee", "dtc"]), default=None,
                           help="Override the TE backend.")
ledger_opt = click.option("--ledger", type=click.Choice(["scriptless", "timelock"]),
                          default=None, help="Override the ledger kind.")


@click.group()
def main() -> None:
    """Deterministic simulator for delegated-custody transfers and swaps."""


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write the JSONL event trace here.")
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Write the JSON report here.")
@click.option("--figures", "figures_dir", type=click.Path(), default=None,
              help="Render figures and a receipts CSV into this directory.")
@click.option("--oracle/--no-oracle", default=False,
              help="Force the differential check against the reference model.")
@seed_opt
@backend_opt
@ledger_opt
def run(scenario_file, trace_path, report_path, figures_dir, oracle, seed, backend, ledger):
    """Run one scenario to its horizon and report verdicts."""
    scenario = _load(scenario_file, seed, backend, ledger, oracle)
    rep = harness.run(scenario)
    rt = rep.pop("_runtime")
    if trace_path:
        rt.sim.dump_trace(trace_path)
    if report_path:
        report_mod.write_report_json(rep, report_path)
    if figures_dir:
        os.makedirs(figures_dir, exist_ok=True)
        report_mod.write_receipts_csv(rep, os.path.join(figures_dir, "receipts.csv"))
        report_mod.render_run_figures(rep, figures_dir)
    for receipt in rep["receipts"]:
        click.echo("receipt %(kind)s sid=%(sid)s party=%(party)s rounds=%(rounds)d "
                   "onchain=%(onchain)d" % receipt)
    for fair in rep["fairness"]:
        click.echo("fairness %s: %s" % (fair["sid"], "pass" if fair["pass"] else "FAIL"))
    if rep["differential"] is not None:
        click.echo("differential: %s"
                   % ("equal" if rep["differential"]["equal"] else "MISMATCH"))
    click.echo("ok" if rep["ok"] else "FAILED")
    sys.exit(0 if rep["ok"] else 1)


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(), default=None,
              help="Write sweep.csv and sweep.png into this directory.")
@seed_opt
@backend_opt
@ledger_opt
def sweep(scenario_file, out_dir, seed, backend, ledger):
    """Run the single-crash sweep over the scenario's swap."""
    scenario = _load(scenario_file, seed, backend, ledger, oracle=False)
    if not any(a["op"] == "swap" for a in scenario["script"]):
        raise click.ClickException("sweep needs a scenario containing a swap")
    reports = harness.sweep_crashes(scenario)
    for rep in reports:
        rep.pop("_runtime", None)
        point = rep["crash_point"]
        click.echo("crash %s@r%d: %s" % (point["party"], point["round"],
                                         "ok" if rep["ok"] else "FAIL"))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report_mod.write_sweep_csv(reports, os.path.join(out_dir, "sweep.csv"))
        report_mod.render_sweep_figure(reports, out_dir)
    failed = [r for r in reports if not r["ok"]]
    click.echo("%d/%d crash points fair" % (len(reports) - len(failed), len(reports)))
    sys.exit(0 if not failed else 1)


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--reps", type=int, default=10, show_default=True,
              help="Fresh runs (seed varied per run).")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Write bench.csv and bench.png into this directory.")
@seed_opt
@backend_opt
@ledger_opt
def bench(scenario_file, reps, out_dir, seed, backend, ledger):
    """Measure per-operation round and message counts over repeated runs."""
    scenario = _load(scenario_file, seed, backend, ledger, oracle=False)
    counters = harness.bench_rounds(scenario, reps)
    for op, c in sorted(counters.items()):
        click.echo("%s: rounds %d..%d, messages %d..%d, onchain<=%d (%d runs)"
                   % (op, c["rounds_min"], c["rounds_max"], c["messages_min"],
                      c["messages_max"], c["onchain_max"], c["runs"]))
    if "swap" in counters and counters["swap"]["messages_min"] < 3:
        raise click.ClickException(
            "optimistic fair exchange needs at least three messages")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report_mod.write_bench_csv(counters, os.path.join(out_dir, "bench.csv"))
        report_mod.render_bench_figure(counters, out_dir)


if __name__ == "__main__":
    main()
