# ruff: noqa: T201

import argparse
import csv
import dataclasses
import logging
import sys
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Final

import numpy as np

from py_rce_detect.attacks import AttackConfig, AttackFamily, run_attack, uniform_noise
from py_rce_detect.checkpoint import load_detector, load_model, save_detector, save_model, write_tensors
from py_rce_detect.classifier import accuracy, infer, train
from py_rce_detect.config import RunConfig, Subcommand, stage_seed, validate_config
from py_rce_detect.datasets import Dataset
from py_rce_detect.detectors import (
    NOT_SURE,
    DetectorState,
    Metric,
    calibrate,
    confidence_scores,
    decide,
    kdensity_eta,
    kdensity_fit,
    kdensity_log_scores,
    non_me_scores,
    scores_from_outputs,
)
from py_rce_detect.evaluation import (
    EvalReport,
    Measurement,
    accuracy_vs_cw_constant,
    accuracy_vs_epsilon,
    build_detection_cohort,
    cohort_auc,
    distortion,
    emit_report,
    f2_positive_ratio,
    kdensity_histogram,
    kdensity_values,
    noise_evaluation,
    transfer_eval,
)
from py_rce_detect.exception import ConfigError, RceError, ShapeError
from py_rce_detect.factories import create_datasets, create_model
from py_rce_detect.geometry import VerificationReport, verify_suite
from py_rce_detect.network import NetworkModel

logger = logging.getLogger(__name__)

LOG_FORMAT: Final = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_FAILURE: Final = 1
EXIT_USAGE: Final = 2


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    args = _parse_args(argv)

    try:
        text = args.config.read_text(encoding="utf-8") if args.config is not None else "{}"
    except OSError as e:
        logger.error("Cannot read configuration: %s", e)  # noqa: TRY400
        return EXIT_USAGE

    overrides = {
        "subcommand": args.subcommand,
        "out": None if args.out is None else str(args.out),
        "seed": args.seed,
        "threads": args.threads,
    }
    try:
        config = validate_config(text, overrides)
    except ConfigError as e:
        for error in e.errors:
            logger.error("%s", error)  # noqa: TRY400
        return EXIT_USAGE
    return run(config)


def _parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="py_rce_detect")

    parser.add_argument("subcommand", choices=[subcommand.value for subcommand in Subcommand])
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)

    return parser.parse_args(argv)


def run(config: RunConfig) -> int:
    """Execute one subcommand; 0 when it completes without failures."""
    handlers: dict[Subcommand, Callable[[RunConfig], int]] = {
        Subcommand.TRAIN: _run_train,
        Subcommand.ATTACK: _run_attack,
        Subcommand.DETECT: _run_detect,
        Subcommand.EVAL: _run_eval,
        Subcommand.VERIFY_THEORY: _run_verify,
    }
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        return handlers[config.subcommand](config)
    except (RceError, OSError, ValueError) as e:
        logger.error("%s failed: %s", config.subcommand.value, e)  # noqa: TRY400
        return EXIT_FAILURE


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info("Stage %s", name)
    try:
        yield
    except (RceError, OSError, ValueError):
        logger.error("Stage %s failed", name)  # noqa: TRY400
        raise


# ============================================================================
# Shared plumbing
# ============================================================================


def _load_data(config: RunConfig) -> tuple[Dataset, Dataset]:
    spec = config.dataset
    if spec is None:
        raise ValueError("This subcommand needs a dataset.")
    train_set, test_set = create_datasets(
        spec.name,
        spec.path,
        seed=stage_seed(config.seed, "data"),
        synthetic_classes=spec.synthetic_classes,
        synthetic_per_class=spec.synthetic_per_class,
        synthetic_dim=spec.synthetic_dim,
        synthetic_separation=spec.synthetic_separation,
    )
    return train_set.head(spec.train_limit), test_set.head(spec.test_limit)


def _load_checkpoint(config: RunConfig, dataset: Dataset) -> NetworkModel:
    if config.model.checkpoint is None:
        raise ValueError("This subcommand needs model.checkpoint.")
    model = load_model(config.model.checkpoint)
    if model.input_shape != dataset.image_shape or model.num_classes != dataset.num_classes:
        msg = (
            f"Checkpoint expects {model.input_shape} inputs and {model.num_classes} classes, "
            f"dataset has {dataset.image_shape} and {dataset.num_classes}."
        )
        raise ShapeError(msg)
    return model


def _fit_detector(config: RunConfig, model: NetworkModel, reference: Dataset, metric: Metric) -> DetectorState:
    spec = config.detector
    sigma2 = spec.bandwidth(model.objective)
    if metric is Metric.KDENSITY:
        state = kdensity_fit(
            model, reference, sigma2, max_bank_size=spec.max_bank_size, seed=stage_seed(config.seed, "detector")
        )
        state = state.with_eta(kdensity_eta(state, model, reference))
    else:
        state = DetectorState(metric, sigma2=sigma2)
    return calibrate(state, model, reference, spec.percentile)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(["" if cell is None else cell for cell in row] for row in rows)
    logger.info("Wrote %s", path)


# ============================================================================
# Subcommands
# ============================================================================


def _run_train(config: RunConfig) -> int:
    with _stage("data"):
        train_set, test_set = _load_data(config)
    with _stage("train"):
        model = create_model(
            config.model.architecture,
            train_set.image_shape,
            train_set.num_classes,
            config.model.objective,
            leak=config.train.leak,
            seed=stage_seed(config.seed, "init"),
        )
        result = train(model, train_set, config.train)
        if len(test_set):
            logger.info("Test accuracy %.4f", accuracy(model, test_set))
    with _stage("save"):
        save_model(model, config.out / "model.rce")
        trace = ((step, repr(loss)) for step, loss in result.loss_trace)
        _write_csv(config.out / "loss_trace.csv", ("step", "loss"), trace)
    return 0


def _run_attack(config: RunConfig) -> int:
    if config.attack is None:
        raise ValueError("The attack subcommand needs an attack block.")
    with _stage("data"):
        _, test_set = _load_data(config)
        model = _load_checkpoint(config, test_set)
        detector = None if config.detector.checkpoint is None else load_detector(config.detector.checkpoint)
        inputs = test_set.head(config.attack_limit)
    with _stage("attack"):
        attack_run = run_attack(
            model, inputs.images, inputs.labels, config.attack, detector=detector, threads=config.threads
        )
    with _stage("save"):
        adversarial = attack_run.adversarial if len(attack_run) else inputs.images[:0]
        write_tensors(
            config.out / "adversarial.rce",
            {
                "inputs": inputs.images,
                "adversarial": adversarial,
                "labels": inputs.labels,
                "targets": attack_run.targets,
            },
        )
        outputs = infer(model, adversarial)
        confidence = confidence_scores(outputs.probs)
        non_me = non_me_scores(outputs.probs)
        log_density = (
            kdensity_log_scores(detector, outputs.hidden, outputs.labels)
            if detector is not None and detector.metric is Metric.KDENSITY
            else None
        )
        kappa = config.attack.confidence_margin
        rows = (
            (
                index,
                config.attack.family.value,
                repr(config.attack.epsilon),
                repr(kappa),
                int(inputs.labels[index]),
                int(attack_run.targets[index]),
                int(outputs.labels[index]),
                int(result.success),
                result.iterations,
                repr(result.objective),
                repr(distortion(inputs.images[index], result.adversarial)),
                None if result.f2 is None else repr(result.f2),
                None if result.const is None else repr(result.const),
                repr(float(confidence[index])),
                repr(float(non_me[index])),
                None if log_density is None else repr(float(log_density[index])),
            )
            for index, result in enumerate(attack_run.results)
        )
        _write_csv(
            config.out / "attack.csv",
            (
                "index",
                "family",
                "epsilon",
                "kappa",
                "label",
                "target",
                "predicted",
                "success",
                "iterations",
                "objective",
                "distortion",
                "f2",
                "const",
                "confidence",
                "non_me",
                "log_kdensity",
            ),
            rows,
        )
    return 0


def _run_detect(config: RunConfig) -> int:
    with _stage("data"):
        train_set, test_set = _load_data(config)
        model = _load_checkpoint(config, train_set)
    with _stage("detect"):
        state = _fit_detector(config, model, train_set, config.detector.metric)
        outputs = infer(model, test_set.images)
        scores = scores_from_outputs(state, outputs)
    with _stage("save"):
        save_detector(state, config.out / "detector.rce")
        rows = []
        for index, (label, predicted, score) in enumerate(
            zip(test_set.labels, outputs.labels, scores, strict=True)
        ):
            verdict = decide(int(predicted), float(score), state.threshold)
            verdict_name = "not_sure" if verdict is NOT_SURE else "pass"
            rows.append((index, int(label), int(predicted), repr(float(score)), verdict_name))
        _write_csv(config.out / "verdicts.csv", ("index", "label", "predicted", "score", "verdict"), rows)
    return 0


def _attack_template(config: RunConfig, family: AttackFamily) -> AttackConfig:
    """Shared attack settings from the config, retargeted at `family` with its own seed."""
    base = config.attack if config.attack is not None else AttackConfig(family)
    return dataclasses.replace(
        base,
        family=family,
        kappa=base.kappa if base.family is family else None,
        seed=stage_seed(config.seed, f"eval/{family.value}"),
    )


def _run_eval(config: RunConfig) -> int:  # noqa: C901, PLR0915
    spec = config.eval
    with _stage("data"):
        train_set, test_set = _load_data(config)
        model = _load_checkpoint(config, test_set)
        test_set = test_set.head(spec.limit)
    with _stage("detector"):
        if config.detector.checkpoint is not None:
            detector = load_detector(config.detector.checkpoint)
        else:
            detector = _fit_detector(config, model, train_set, config.detector.metric)
        density = (
            detector
            if detector.metric is Metric.KDENSITY
            else _fit_detector(config, model, train_set, Metric.KDENSITY)
        )

    dataset_name = config.dataset.name if config.dataset is not None else ""
    objective = model.objective.value
    run_id = f"{dataset_name}-{objective}-{config.seed}"
    measurements: list[Measurement] = []

    def record(
        attack: str,
        metric: str,
        value: float | None,
        n: int,
        *,
        epsilon: float | None = None,
        kappa: float | None = None,
    ) -> None:
        measurements.append(Measurement(run_id, dataset_name, objective, attack, metric, epsilon, kappa, value, n))

    record("none", "accuracy", accuracy(model, test_set), len(test_set))

    with _stage("detection"):
        adversarial_density = None
        for family in spec.attacks:
            template = _attack_template(config, family)
            cohort = build_detection_cohort(model, template, test_set, detector=density, threads=config.threads)
            epsilon = template.epsilon if family.epsilon_bounded else None
            kappa = None if family.epsilon_bounded else template.confidence_margin
            attempted = len(cohort.run) if cohort.run is not None else 0
            record(family.value, "success_rate", len(cohort) / attempted if attempted else None, attempted,
                   epsilon=epsilon, kappa=kappa)
            if len(cohort):
                mean_distortion = float(
                    np.mean([distortion(x, x_adv) for x, x_adv in zip(cohort.normal, cohort.adversarial, strict=True)])
                )
                record(family.value, "distortion", mean_distortion, len(cohort), epsilon=epsilon, kappa=kappa)
                if family is AttackFamily.CW:
                    adversarial_density = kdensity_values(model, cohort.adversarial, density)
            for metric in spec.metrics:
                auc = cohort_auc(model, cohort, metric, density)
                record(family.value, f"auc_{metric.value}", auc, len(cohort), epsilon=epsilon, kappa=kappa)

    with _stage("robustness"):
        for family in spec.curve_families:
            for epsilon, value in accuracy_vs_epsilon(
                model, family, spec.epsilons, test_set, base=_attack_template(config, family), threads=config.threads
            ):
                record(family.value, "accuracy", value, len(test_set), epsilon=epsilon)
        for const, value in accuracy_vs_cw_constant(
            model, spec.cw_constants, test_set, base=_attack_template(config, AttackFamily.CW), threads=config.threads
        ):
            record(AttackFamily.CW.value, f"accuracy_c={const:g}", value, len(test_set))

    with _stage("white-box"):
        for kappa in spec.white_box_kappas:
            white_box = dataclasses.replace(
                _attack_template(config, AttackFamily.CW_WB), kappa=kappa, eta=density.eta
            )
            summary = f2_positive_ratio(model, density, test_set, white_box, threads=config.threads)
            record(AttackFamily.CW_WB.value, "f2_positive_ratio", summary.ratio, summary.successes, kappa=kappa)

    with _stage("noise"):
        noise_seed = stage_seed(config.seed, "eval/noise")
        noise = noise_evaluation(model, detector, test_set, spec.noise_epsilon, noise_seed)
        for metric, value in (
            ("clean_accuracy", noise.clean_accuracy),
            ("noisy_accuracy", noise.noisy_accuracy),
            ("pass_rate", noise.pass_rate),
        ):
            record(AttackFamily.RAND.value, metric, value, len(test_set), epsilon=spec.noise_epsilon)

        cohorts = {
            "none": kdensity_values(model, test_set.images, density),
            AttackFamily.RAND.value: kdensity_values(
                model, uniform_noise(test_set.images, spec.noise_epsilon, noise_seed), density
            ),
        }
        if adversarial_density is not None:
            cohorts[AttackFamily.CW.value] = adversarial_density
        for attack, scores in cohorts.items():
            counts, edges = kdensity_histogram(scores, spec.histogram_bins)
            for count, low, high in zip(counts, edges[:-1], edges[1:], strict=True):
                record(attack, f"kdensity_hist[{low:.3f},{high:.3f})", float(count), int(scores.size))

    if spec.substitute is not None:
        with _stage("transfer"):
            substitute = load_model(spec.substitute)
            if substitute.input_shape != model.input_shape or substitute.num_classes != model.num_classes:
                msg = f"Substitute {spec.substitute} does not match the evaluated model's input or classes."
                raise ShapeError(msg)
            substitute_density = _fit_detector(config, substitute, train_set, Metric.KDENSITY)
            template = dataclasses.replace(_attack_template(config, AttackFamily.CW_WB), eta=substitute_density.eta)
            summary_t = transfer_eval(
                substitute,
                model,
                template,
                test_set,
                target_detector=density,
                substitute_detector=substitute_density,
                threads=config.threads,
            )
            transfer_name = f"{summary_t.family.value}_transfer"
            record(transfer_name, "transfer_rate", summary_t.transfer_rate, summary_t.n)
            record(transfer_name, "direct_rate", summary_t.direct_rate, summary_t.n)
            record(transfer_name, "auc_kdensity", summary_t.auc, summary_t.n)

    with _stage("report"):
        metadata = {
            "seed": config.seed,
            "checkpoint": str(config.model.checkpoint),
            "detector_metric": detector.metric.value,
            "threshold": detector.threshold,
            "sigma2": density.sigma2,
            "eta": density.eta,
            "limit": len(test_set),
        }
        emit_report(EvalReport(run_id, tuple(measurements), metadata), config.out)
    return 0


def _run_verify(config: RunConfig) -> int:
    spec = config.verify
    with _stage("verify-theory"):
        reports = verify_suite(spec.geometries, spec.theorem2_trials, spec.class_counts, config.seed)
    _print_table(reports)
    _write_csv(
        config.out / "theory.csv",
        ("name", "passed", "checked", "skipped", "witness"),
        ((r.name, int(r.passed), r.checked, r.skipped, "" if r.witness is None else repr(r.witness)) for r in reports),
    )
    return 0 if all(report.passed for report in reports) else EXIT_FAILURE


def _print_table(reports: Sequence[VerificationReport]) -> None:
    print(f"{'check':<12} {'result':<6} {'checked':>8} {'skipped':>8}")
    for report in reports:
        print(f"{report.name:<12} {'pass' if report.passed else 'FAIL':<6} {report.checked:>8} {report.skipped:>8}")
        if report.witness is not None:
            print(f"  witness: {report.witness}")


if __name__ == "__main__":
    sys.exit(main())
