"""Command-line entry point of the neural-diversity laboratory.

Every subcommand writes its artifacts and a ``manifest.json`` into the output
directory. ``replay`` re-runs a manifest with its recorded configuration and
checks that every artifact is reproduced bit for bit.

Usage:
    ndlab theory [options] [--set=<kv>]...
    ndlab train [options] [--arm=<arm>] [--resume=<ckpt>] [--set=<kv>]...
    ndlab diversity --checkpoint=<ckpt> [options] [--set=<kv>]...
    ndlab corrupt --checkpoint=<ckpt> [options] [--set=<kv>]...
    ndlab compare --checkpoint=<ckpt> --against=<ckpt> [options] [--set=<kv>]...
    ndlab cost [options] [--set=<kv>]...
    ndlab replay --manifest=<m> [options]
    ndlab -h | --help
    ndlab --version

Options:
    -h --help              Show this screen.
    --version              Show the version.
    --config=<cf>          Configuration file, JSON or flat section.key=value lines.
    --set=<kv>             Override one configuration value, e.g. train.steps=100.
    --seed=<s>             Root seed of every random stream.
    --out-dir=<od>         Directory receiving the artifacts and the manifest.
    --threads=<t>          Worker threads for pair norms, MC shards and sub-experiments.
    --arm=<arm>            Ablation arm: standard, parscale, parscale_bt, stream, stream_bt or ndlora.
    --resume=<ckpt>        Continue training from this checkpoint.
    --checkpoint=<ckpt>    Trained model to analyse.
    --against=<ckpt>       Second trained model of a comparison.
    --manifest=<m>         Manifest of the run to replay.
    --log-file=<lf>        Write logs to this file instead of stderr.
    --verbose              Set logging level to DEBUG (by default is INFO).
    --quiet                Hide progress bars.
"""

import os
import sys
import logging
from typing import Any, Callable, Optional

from docopt import docopt

from neural_diversity import __version__
from neural_diversity.costmodel import (
    AMORTIZATION_HEADER,
    COST_TABLE_HEADER,
    amortized_cost,
    cost_table,
    golden_variants,
    inference_latency_factor,
)
from neural_diversity.errors import CertificationError, ConfigError, ExitCode, NdLabError
from neural_diversity.intervention.experiment import (
    COMBINED_HEADER,
    INTERVENTION_HEADER,
    compare_models,
    paired_eval,
)
from neural_diversity.intervention.stats import null_calibration
from neural_diversity.io.config import LabConfig, build_lab_config, load_config
from neural_diversity.io.fs_utils import write_csv, write_json
from neural_diversity.io.manifest import RunManifest, compare_artifacts
from neural_diversity.model.checkpoint import load_checkpoint
from neural_diversity.model.layers import Backbone
from neural_diversity.model.transformer import build_model, parameter_count
from neural_diversity.theory.bounds import bound_curve, find_p_star
from neural_diversity.theory.montecarlo import MC_CERT_HEADER, certify_grid
from neural_diversity.training.corpus import generate_corpus
from neural_diversity.training.loop import (
    DIVERSITY_TRACE_HEADER,
    PAIR_TRACE_HEADER,
    TRAIN_TRACE_HEADER,
    diversity_report,
    evaluate,
    pretrain_backbone,
    train,
)
from neural_diversity.training.optim import AdamWState
from neural_diversity.utils import Timer, init_logger

logger = logging.getLogger(__name__)

BOUND_CURVE_HEADER = ["P", "rho", "g", "B"]
PAIR_HEADER = ["i", "j", "norm", "converged"]
SAMPLE_HEADER = ["subexp", "index", "baseline", "corrupted", "delta"]
COMPARISON_HEADER = ["index", "hit_a", "hit_b"]
CHECKPOINT_FILENAME = "checkpoint.npz"
# options forwarded to the subcommands and recorded for replay
FORWARDED_OPTIONS = ["--arm", "--resume", "--checkpoint", "--against"]


def _progress(lab: LabConfig) -> bool:
    return lab.run.progress and sys.stderr.isatty()


def _threads(lab: LabConfig) -> Optional[int]:
    return lab.run.threads if lab.run.threads > 1 else None


def _emit_csv(manifest: RunManifest, out_dir: str, name: str, header: list[str], rows: list) -> None:
    manifest.add_artifact(write_csv(os.path.join(out_dir, name), header, rows), out_dir)


def _emit_json(manifest: RunManifest, out_dir: str, name: str, contents: Any) -> None:
    manifest.add_artifact(write_json(os.path.join(out_dir, name), contents), out_dir)


def cmd_theory(lab: LabConfig, out_dir: str, manifest: RunManifest, **_: Any) -> None:
    """Bound curve along the correlation schedule and Monte Carlo certification.

    Raises:
        CertificationError: A grid point fails its rate or variance check;
            every artifact is written first.
    """
    th = lab.theory
    curve = bound_curve(th.sigma2, th.mu, th.schedule, th.p_range)
    p_star = find_p_star(curve)
    logger.info("P* = %s (B = %.6f, boundary: %s).", p_star.P, p_star.B, p_star.boundary)
    _emit_csv(manifest, out_dir, "bound_curve.csv", BOUND_CURVE_HEADER, curve.to_rows())

    rows = certify_grid(
        th.grid, th.mc_samples, lab.run.seed, th.mc_shards, _threads(lab), th.n_sigmas, _progress(lab)
    )
    _emit_csv(manifest, out_dir, "mc_cert.csv", MC_CERT_HEADER, [r.to_row() for r in rows])
    failed = [r for r in rows if not (r.passed and r.variance_passed)]
    summary = {
        "p_star": p_star.P,
        "B_star": p_star.B,
        "boundary": p_star.boundary,
        "ties": list(p_star.ties),
        "sign_changes": curve.sign_changes(),
        "clipped": curve.clipped,
        "certified_points": len(rows) - len(failed),
        "failed_points": [r.to_dict() for r in failed],
    }
    _emit_json(manifest, out_dir, "theory.json", summary)
    if failed:
        msg = f"{len(failed)} of {len(rows)} grid points failed certification."
        logger.error(msg)
        raise CertificationError(msg)


def cmd_train(
    lab: LabConfig, out_dir: str, manifest: RunManifest, resume: Optional[str] = None, **_: Any
) -> None:
    """Pre-train a backbone (or resume a checkpoint) and fine-tune the streams."""
    cfg = lab.train
    corpus = generate_corpus(lab.corpus)
    logger.info("Corpus %s with %s tokens.", corpus.fingerprint()[:12], corpus.token_count)
    summary: dict[str, Any] = {"arm_config": {"P": cfg.P, "lambda_bt": cfg.lambda_bt}}

    state = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model, state = ckpt.model, AdamWState.from_arrays(ckpt.extra_arrays)
        logger.info("Resuming from %s at step %s.", resume, model.step)
    else:
        backbone = Backbone.init(lab.backbone)
        pre = pretrain_backbone(
            backbone,
            corpus,
            lab.pretrain.steps,
            lab.run.seed,
            lab.pretrain.lr,
            lab.pretrain.batch_size,
            progress=_progress(lab),
        )
        summary["pretrain"] = {"initial_ce": pre.initial_ce, "final_ce": pre.final_ce, "steps": pre.steps}
        model = build_model(backbone, cfg.stream_config(), seed=lab.run.seed)

    result = train(
        model,
        corpus,
        cfg,
        state,
        checkpoint_path=os.path.join(out_dir, CHECKPOINT_FILENAME),
        threads=_threads(lab),
        progress=_progress(lab),
    )
    with_diversity = model.P > 1
    header = TRAIN_TRACE_HEADER if with_diversity else TRAIN_TRACE_HEADER[:5]
    rows = [row.to_row(with_diversity) for row in result.trace]
    _emit_csv(manifest, out_dir, "train_trace.csv", header, rows)
    if with_diversity:
        _emit_csv(manifest, out_dir, "diversity_trace.csv", DIVERSITY_TRACE_HEADER, result.diversity)
        _emit_csv(manifest, out_dir, "pair_trace.csv", PAIR_TRACE_HEADER, result.pairs)

    seq_len = min(cfg.seq_len, model.backbone.config.max_seq_len + 1)
    summary.update(
        {
            "steps": model.step,
            "held_out_ce": float(evaluate(model, corpus, n=cfg.eval_size, seq_len=seq_len).mean()),
            "final_d_spec": result.trace[-1].d_spec if result.trace else None,
            "parameters": parameter_count(model).as_dict(),
            "backbone_sha256": model.backbone.checksum(),
            "checkpoint": CHECKPOINT_FILENAME,
        }
    )
    _emit_json(manifest, out_dir, "train.json", summary)


def cmd_diversity(lab: LabConfig, out_dir: str, manifest: RunManifest, checkpoint: str, **_: Any) -> None:
    """Diversity report of a trained model on held-out sequences."""
    model = load_checkpoint(checkpoint).model
    corpus = generate_corpus(lab.corpus)
    tokens = corpus.eval[: lab.train.eval_size, :-1][:, : model.backbone.config.max_seq_len]
    report = diversity_report(model, tokens, lab.train.whitening, _threads(lab))
    logger.info("D_spec = %.4f over %s pairs (%s whitening).", report.d_spec, len(report.pairs), report.mode)
    rows = [[p.i, p.j, p.value, p.converged] for p in report.pairs]
    _emit_csv(manifest, out_dir, "diversity_pairs.csv", PAIR_HEADER, rows)
    _emit_json(manifest, out_dir, "diversity.json", report.as_dict())


def cmd_corrupt(lab: LabConfig, out_dir: str, manifest: RunManifest, checkpoint: str, **_: Any) -> None:
    """Paired corruption experiment on a trained model."""
    model = load_checkpoint(checkpoint).model
    corpus = generate_corpus(lab.corpus)
    result = paired_eval(model, corpus, lab.corrupt, _threads(lab))
    _emit_csv(manifest, out_dir, "intervention.csv", INTERVENTION_HEADER, result.rows())
    _emit_csv(manifest, out_dir, "intervention_combined.csv", COMBINED_HEADER, [result.combined_row()])
    samples = [
        [sub.subexp, int(idx), b, c, c - b]
        for sub in result.subexperiments
        for idx, b, c in zip(sub.indices, sub.baseline, sub.corrupted)
    ]
    _emit_csv(manifest, out_dir, "intervention_samples.csv", SAMPLE_HEADER, samples)
    summary = {
        "delta_dspec": result.delta_dspec,
        "mean_delta": float(result.deltas.mean()),
        "effect_size": result.effect_size,
        "fisher": dict(zip(COMBINED_HEADER, result.combined_row())),
        "null_ks": null_calibration(lab.corrupt.n_samples, seed=lab.corrupt.seed),
    }
    _emit_json(manifest, out_dir, "intervention.json", summary)


def cmd_compare(
    lab: LabConfig, out_dir: str, manifest: RunManifest, checkpoint: str, against: str, **_: Any
) -> None:
    """McNemar and bootstrap comparison of two trained models."""
    model_a = load_checkpoint(checkpoint).model
    model_b = load_checkpoint(against).model
    corpus = generate_corpus(lab.corpus)
    result = compare_models(model_a, model_b, corpus, lab.corrupt.n_samples, lab.corrupt.seed)
    rows = [
        [int(idx), a, b] for idx, a, b in zip(result.probe_indices, result.hits_a, result.hits_b)
    ]
    _emit_csv(manifest, out_dir, "comparison_probes.csv", COMPARISON_HEADER, rows)
    _emit_json(manifest, out_dir, "comparison.json", result.as_dict())


def cmd_cost(lab: LabConfig, out_dir: str, manifest: RunManifest, **_: Any) -> None:
    """Cost table of the reference variants plus the configured variant."""
    golden = golden_variants()
    _emit_csv(manifest, out_dir, "cost_table.csv", COST_TABLE_HEADER, cost_table(golden))

    cost = lab.cost
    configured = cost.variant()
    amortization = []
    for variant in golden + [configured]:
        relative = round(variant.relative, 3)
        lifecycle = amortized_cost(cost.pretrain_tokens, cost.finetune_tokens, relative)
        amortization.append([variant.name, cost.pretrain_tokens, cost.finetune_tokens, relative, lifecycle])
    _emit_csv(manifest, out_dir, "amortization.csv", AMORTIZATION_HEADER, amortization)
    summary = {
        "configured": dict(zip(COST_TABLE_HEADER, configured.to_row())),
        "lifecycle": amortization[-1][-1],
        "inference_latency": inference_latency_factor(cost.P),
    }
    _emit_json(manifest, out_dir, "cost.json", summary)


COMMANDS: dict[str, Callable[..., None]] = {
    "theory": cmd_theory,
    "train": cmd_train,
    "diversity": cmd_diversity,
    "corrupt": cmd_corrupt,
    "compare": cmd_compare,
    "cost": cmd_cost,
}


def run(subcommand: str, config: dict[str, Any], argv: Optional[list[str]] = None) -> RunManifest:
    """Run `subcommand` with a resolved configuration and write its manifest.

    The manifest is written even when the subcommand fails, listing the
    artifacts produced until then.

    Args:
        subcommand (str): One of `COMMANDS`.
        config (dict[str, Any]): Output of :func:`load_config`.
        argv (list[str] | None, optional): Forwarded ``--option=value`` strings.

    Returns:
        RunManifest: The written manifest.
    """
    argv = argv or []
    options = {}
    for arg in argv:
        key, _, value = arg.partition("=")
        options[key.lstrip("-")] = value
    lab = build_lab_config(config, arm=options.pop("arm", None))
    out_dir = lab.run.out_dir
    os.makedirs(out_dir, exist_ok=True)

    manifest = RunManifest(subcommand, config, lab.run.seed, argv)
    timer = Timer()
    logger.info("Running %s into %s.", subcommand, out_dir)
    try:
        COMMANDS[subcommand](lab, out_dir, manifest, **options)
    finally:
        manifest.finish()
        manifest.write(out_dir)
        logger.info("%s finished in %s.", subcommand, timer.stop())
    return manifest


def replay(manifest_path: str, out_dir: Optional[str] = None) -> list[str]:
    """Re-run a recorded manifest and compare the artifact digests.

    Args:
        manifest_path (str): Manifest of the recorded run.
        out_dir (str | None, optional): Output directory of the replay;
            ``<recorded out_dir>/replay`` when None.

    Raises:
        CertificationError: An artifact differs from the recorded run.

    Returns:
        list[str]: Names of the compared artifacts.
    """
    recorded = RunManifest.load(manifest_path)
    config = dict(recorded.config)
    config["run"] = dict(config["run"])
    config["run"]["out_dir"] = out_dir or os.path.join(config["run"]["out_dir"], "replay")
    replayed = run(recorded.subcommand, config, recorded.argv)

    mismatches = compare_artifacts(recorded, replayed)
    if mismatches:
        msg = f"Replay of {manifest_path} differs for {mismatches}."
        logger.error(msg)
        raise CertificationError(msg)
    logger.info("Replay reproduced %s artifacts.", len(recorded.artifacts))
    return sorted(recorded.artifacts)


def _int_option(arguments: dict[str, Any], name: str) -> Optional[int]:
    value = arguments[name]
    if value is None:
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"{name} expects an integer, got '{value}'.") from e


def main(argv: Optional[list[str]] = None) -> int:
    arguments = docopt(__doc__, argv=argv, version=__version__)
    log_level = logging.DEBUG if arguments["--verbose"] else logging.INFO
    init_logger(logging.getLogger("neural_diversity"), log_level, arguments["--log-file"])

    # suppressing verbose logging of dependencies
    logging.getLogger("dask").setLevel(logging.WARNING)
    logging.getLogger("git").setLevel(logging.WARNING)

    try:
        if arguments["replay"]:
            replay(arguments["--manifest"], arguments["--out-dir"])
            return ExitCode.OK

        subcommand = next(name for name in COMMANDS if arguments[name])
        overrides = list(arguments["--set"] or [])
        if arguments["--quiet"]:
            overrides.append("run.progress=false")
        config = load_config(
            arguments["--config"],
            overrides,
            seed=_int_option(arguments, "--seed"),
            out_dir=arguments["--out-dir"],
            threads=_int_option(arguments, "--threads"),
        )
        forwarded = [f"{opt}={arguments[opt]}" for opt in FORWARDED_OPTIONS if arguments.get(opt)]
        run(subcommand, config, forwarded)
    except NdLabError as e:
        logger.critical("%s failed: %s", type(e).__name__, e)
        return e.exit_code
    return ExitCode.OK


if __name__ == "__main__":
    sys.exit(main())
