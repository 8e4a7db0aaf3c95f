"""Command line: run scenarios, train networks, benchmark, serve a stream.

Every command takes a scenario file via --config; --seed overrides the
file's seed where randomness is involved.  Outputs are plain text files
with documented header lines.
"""

from dataclasses import replace

import click
import numpy as np

from .scenario import ConfigError, load_scenario


def _load(path, seed=None):
    try:
        cfg = load_scenario(path)
    except ConfigError as e:
        raise click.ClickException(str(e))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


@click.group()
def main():
    """Contact simulation for tight-tolerance assembly."""


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", type=click.Path(), default=None, help="Step log destination.")
@click.option(
    "--reference",
    type=click.Path(exists=True),
    default=None,
    help="Reference dataset; the run summary reports wrench RMSE against it.",
)
def run(config, seed, out, reference):
    """Run a scenario and summarize the step log."""
    from .learning import TORQUE_WEIGHT, TrajectoryDataset
    from .runner import run_scenario

    cfg = _load(config, seed)
    log = run_scenario(cfg, out=out)
    n = len(log)
    bodies = len({r.body for r in log.records})
    steps = n // bodies if bodies else 0
    click.echo(f"steps: {steps}" + (f" ({bodies} bodies)" if bodies > 1 else ""))
    if n:
        recs = log.records
        conv = sum(r.converged for r in recs)
        pen = log.mean_penetrations()
        ms = 1000.0 * float(np.sum([r.total_time for r in recs])) / steps
        click.echo(f"converged: {conv}/{n}  retried: {sum(r.retried for r in recs)}")
        click.echo(f"mean penetration: avg {pen.mean():.3e} m  max {pen.max():.3e} m")
        click.echo(f"step time: {ms:.2f} ms avg")
    if out:
        click.echo(f"log written to {out}")
    if reference and n:
        ds = TrajectoryDataset.load(reference)
        if abs(ds.dt - cfg.dt) > 1e-12:
            click.echo(f"note: reference dt {ds.dt} differs from scenario dt {cfg.dt}")
        logged = {r.step: r.wrench for r in log.records if r.body == 0}
        common = [k for k, s in enumerate(ds.steps) if s in logged]
        if not common:
            click.echo("reference: no overlapping step indices")
        else:
            d = np.array([logged[ds.steps[k]] - ds.reference[k] for k in common])
            err = d[:, :3] ** 2 @ np.ones(3) + TORQUE_WEIGHT**2 * (d[:, 3:] ** 2 @ np.ones(3))
            click.echo(
                f"reference: wrench rmse {np.sqrt(err.mean()):.4f} over {len(common)} steps"
            )


@main.command("gen-reference")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=1000)
@click.option("--out", required=True, type=click.Path())
def gen_reference(config, seed, steps, out):
    """Record an unclustered reference dataset under a wandering handle."""
    from .learning import generate_reference

    cfg = _load(config)
    try:
        ds = generate_reference(cfg, seed=seed, steps=steps)
    except ValueError as e:
        raise click.ClickException(str(e))
    ds.save(out)
    click.echo(f"kept {len(ds)} of {steps} steps ({ds.discarded} discarded) -> {out}")


@main.command("train-detect")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--shell", type=int, default=150000, help="Near-surface training samples.")
@click.option("--volume", type=int, default=30000, help="Uniform volume samples.")
@click.option("--epochs", default="250,120,80,50", help="Comma-separated epoch schedule.")
@click.option("--lrs", default="3e-3,1e-3,3e-4,1e-4", help="Comma-separated learning rates.")
@click.option("--rmse-threshold", type=float, default=0.00025)
def train_detect(config, seed, out, shell, volume, epochs, lrs, rmse_threshold):
    """Fit a depth network to the scenario's counterpart shape."""
    from .detect import train_depth_net

    cfg = _load(config)
    net = train_depth_net(
        cfg.target_shape,
        seed=seed,
        n_shell=shell,
        n_volume=volume,
        epochs=_ints(epochs),
        lrs=_floats(lrs),
        rmse_threshold=rmse_threshold,
        verbose=True,
    )
    net.save(out)
    r = net.report
    click.echo(
        f"held-out rmse {r['rmse'] * 1000:.3f} mm, mad {r['mad'] * 1000:.3f} mm, "
        f"normal cos median {r['cos_median']:.4f} -> {out}"
    )


@main.command("train-csurface")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--samples", type=int, default=10000, help="Labeled configurations.")
def train_csurface(config, seed, out, samples):
    """Fit the configuration-space surface net for the scenario's pair."""
    from .cspace import default_config_box, label_configs, train_csurface as fit
    from .geometry import sample_surface_nodes

    cfg = _load(config)
    nodes = sample_surface_nodes(cfg.body_shape, cfg.node_count, cfg.seed)
    box = default_config_box(cfg.body_shape, cfg.target_shape)
    configs, labels = label_configs(
        cfg.body_shape, cfg.target_shape, samples, seed=seed, box=box, nodes=nodes
    )
    net = fit(configs, labels, seed=seed)
    net.save(out)
    click.echo(
        f"held-out accuracy {net.report['accuracy']:.3f} "
        f"({net.report['n_holdout']} configs) -> {out}"
    )


@main.command("train-cluster")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True),
              help="Reference dataset from gen-reference.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Per-generation cost log.")
@click.option("--population", type=int, default=0, help="0 picks the dimension default.")
@click.option("--generations", type=int, default=200)
@click.option("--sigma", type=float, default=0.3)
def train_cluster(config, data, seed, out, log_path, population, generations, sigma):
    """Fit clustering networks to a reference dataset and report held-out cost."""
    from .cluster import create_cluster_nets
    from .cmaes import CmaesConfig
    from .learning import (
        TrajectoryDataset,
        baseline_cost,
        clustering_cost,
        cmaes_optimize,
        cost_context,
        prepare_records,
    )

    cfg = _load(config)
    ds = TrajectoryDataset.load(data)
    nets = create_cluster_nets(m_c=cfg.m_c, knn=cfg.knn, seed=seed)
    ctx = cost_context(cfg, ds.dt)
    cc = CmaesConfig(
        population=population, sigma0=sigma, max_generations=generations, seed=seed
    )

    def progress(gen, best, _sigma):
        if gen % 10 == 0:
            click.echo(f"generation {gen}: best {best:.4f}")
        return False

    best, result = cmaes_optimize(nets, ds, ctx, cc, log_path=log_path, callback=progress)
    best.save(out)

    _, test = ds.train_test()
    held = prepare_records(ctx, test, nets.lo, nets.hi)
    trained = clustering_cost(best, held, ctx)
    base = baseline_cost(held, ctx, cfg.m_c, seed=seed)
    click.echo(
        f"train cost {result.history[0]:.4f} -> {result.cost:.4f} "
        f"in {result.generations} generations"
    )
    click.echo(
        f"held-out: trained {trained:.4f}  kmeans+pgs {base:.4f}  "
        f"ratio {trained / base:.3f} -> {out}"
    )


@main.command("bench-detect")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--poses", type=int, default=10000)
@click.option("--seed", type=int, default=0)
def bench_detect(config, poses, seed):
    """Compare learned detection timing against the analytic oracle."""
    from .runner import bench_detection

    cfg = _load(config)
    try:
        r = bench_detection(cfg, poses=poses, seed=seed)
    except (ValueError, RuntimeError) as e:
        raise click.ClickException(str(e))
    click.echo(f"poses: {r['poses']}  nodes: {r['node_count']}")
    click.echo(f"average ms: learned {r['nn_avg_ms']:.3f}  oracle {r['brute_avg_ms']:.3f}")
    click.echo(f"maximum ms: learned {r['nn_max_ms']:.3f}  oracle {r['brute_max_ms']:.3f}")
    click.echo(f"speedup: {r['speedup']:.2f}x")


@main.command("bench-penetration")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0, help="Disturbance schedule seed.")
@click.option("--steps", type=int, default=None)
def bench_penetration(config, seed, steps):
    """Paired disturbance runs with the configuration-space guard off and on."""
    from .runner import bench_penetration as bench

    cfg = _load(config)
    try:
        r = bench(cfg, disturbance_seed=seed, steps=steps)
    except ValueError as e:
        raise click.ClickException(str(e))
    click.echo(f"mean |d|: guard off {r['pen_off'].mean():.3e} m  on {r['pen_on'].mean():.3e} m")
    click.echo(f"max |d|:  guard off {r['max_off']:.3e} m  on {r['max_on']:.3e} m")
    click.echo(f"guard not worse on {100 * r['fraction_not_worse']:.1f}% of steps")


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=8765)
@click.option("--host", default="127.0.0.1")
@click.option("--divisor", type=int, default=1, help="Broadcast every n-th step.")
def serve(config, port, host, divisor):
    """Stream a live scenario over WebSocket and accept steering commands."""
    from .server import serve as run_server

    cfg = _load(config)
    try:
        run_server(cfg, port, host=host, divisor=divisor)
    except ValueError as e:
        raise click.ClickException(str(e))


if __name__ == "__main__":
    main()
