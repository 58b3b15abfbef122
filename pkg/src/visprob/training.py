"""Outcome-supervised training: curriculum loop, loss, and evaluation.

Supervision is the final answer label only. The forward/backward/update path
runs inside :func:`visprob.world.training_guard`, so any attempt to read
ground-truth intermediate values during optimization raises; the evaluation
pass between epochs runs outside the guard and is the single sanctioned
consumer of those values (module-level accuracy needs them).
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import dsl, world
from .autodiff import DiffScalar, OptimizerConfig, ParamStore, Tape, make_optimizer
from .engine import execute_argmax, infer
from .errors import ConfigError, LabelNotInSupportError, VisprobError
from .modules import ModuleSet
from .seeding import derive_seed
from .values import Categorical, token_of

CLAMP_FLOOR = 1e-12


# --- configuration ------------------------------------------------------------------


@dataclass
class DisruptionConfig:
    fraction: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    mode: str = "exact"  # exact | factorized
    seed: int = 7
    batch_size: int = 32
    epochs_per_stage: int = 5
    stages: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    curriculum_enabled: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    disruption: DisruptionConfig = field(default_factory=DisruptionConfig)
    determinism: bool = True
    eval_cadence: int = 1  # epochs between metric evaluations; 0 disables

    def validate(self) -> None:
        if self.mode not in ("exact", "factorized"):
            raise ConfigError(f"mode must be exact or factorized, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_per_stage < 0:
            raise ConfigError("epochs_per_stage must be >= 0")
        if not self.stages:
            raise ConfigError("stages must be non-empty")
        if any(b < a for a, b in zip(self.stages, self.stages[1:])):
            raise ConfigError(f"stage thresholds must be non-decreasing: {self.stages}")
        if not 0.0 <= self.disruption.fraction <= 1.0:
            raise ConfigError("disruption.fraction must be within [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        def take(src: dict, allowed: set[str], where: str) -> dict:
            unknown = sorted(set(src) - allowed)
            if unknown:
                raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")
            return src

        top = take(dict(data), {"mode", "seed", "batch_size", "epochs_per_stage",
                                "curriculum", "optimizer", "disruption",
                                "determinism", "eval_cadence"}, "config")
        config = cls()
        for key in ("mode", "seed", "batch_size", "epochs_per_stage",
                    "determinism", "eval_cadence"):
            if key in top:
                setattr(config, key, top[key])
        if "curriculum" in top:
            cur = take(dict(top["curriculum"]), {"enabled", "stages"}, "curriculum")
            if "enabled" in cur:
                config.curriculum_enabled = bool(cur["enabled"])
            if "stages" in cur:
                config.stages = list(cur["stages"])
        if "optimizer" in top:
            opt = take(dict(top["optimizer"]),
                       {"kind", "lr", "momentum", "beta1", "beta2", "eps",
                        "weight_decay"}, "optimizer")
            config.optimizer = OptimizerConfig(**opt)
        if "disruption" in top:
            dis = take(dict(top["disruption"]), {"fraction", "seed"}, "disruption")
            config.disruption = DisruptionConfig(**dis)
        config.validate()
        return config

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)


# --- metrics -------------------------------------------------------------------------


CSV_COLUMNS = ("epoch", "stage", "loss", "acc_final", "acc_loc", "acc_vqa",
               "err_program", "err_module", "err_other", "seconds")


@dataclass
class MetricsRow:
    epoch: int
    stage: int
    loss: float | None
    acc_final: float | None
    acc_loc: float | None
    acc_vqa: float | None
    err_program: int | None
    err_module: int | None
    err_other: int | None
    seconds: float
    skipped: int = 0  # training examples skipped by the error policy (JSON only)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(getattr(r, col)) if col != "seconds"
                              else f"{r.seconds:.3f}" for col in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def metrics_to_json(rows: list[MetricsRow]) -> list[dict]:
    out = []
    for r in rows:
        d = {col: getattr(r, col) for col in CSV_COLUMNS}
        d["skipped"] = r.skipped
        out.append(d)
    return out


# --- loss ----------------------------------------------------------------------------


def nll_loss(batch: list[tuple[Categorical, str]], tape: Tape,
             clamp: float = CLAMP_FLOOR) -> DiffScalar:
    """Mean negative log-likelihood of the labels under the predictions.

    Probabilities are clamped at ``clamp`` before the log (no renormalizing),
    so an impossible label costs a large finite penalty instead of an inf.
    """
    if not batch:
        raise ValueError("empty batch")
    terms = []
    for pred, label in batch:
        prob = None
        for v, p in zip(pred.support, pred.probs):
            if token_of(v) == label:
                prob = p
                break
        if prob is None:
            raise LabelNotInSupportError(
                f"label {label!r} not in prediction support "
                f"{[token_of(v) for v in pred.support]}")
        if isinstance(prob, DiffScalar):
            terms.append(prob.clamp_min(clamp).log())
        else:
            terms.append(math.log(max(prob, clamp)))
    total = tape.sum([t for t in terms if isinstance(t, DiffScalar)],
                     const=sum(t for t in terms if not isinstance(t, DiffScalar)))
    return total * (-1.0 / len(batch))


# --- evaluation ------------------------------------------------------------------------


@dataclass
class EvalResult:
    n: int
    acc_final: float
    acc_loc: float | None
    acc_vqa: float | None
    mean_nll: float | None
    err_program: int
    err_module: int
    err_other: int
    n_loc: int
    n_vqa: int


def evaluate(dataset: list[world.CaseRecord], modules: ModuleSet,
             params: ParamStore, world_config: world.WorldConfig,
             mode: str = "exact", with_nll: bool = True,
             _ast_cache: dict | None = None) -> EvalResult:
    """Deployment-style accuracy plus module-level accuracy against ground truth.

    The final answer uses the argmax executor (the deployment semantics).
    Module accuracy compares each LOC/VQA statement's argmax output *in the
    ground-truth context* (true input region) with the oracle value, so a
    wrong upstream detection does not contaminate downstream attribution.
    """
    asts = _ast_cache if _ast_cache is not None else {}
    n = len(dataset)
    final_correct = 0
    loc_total = loc_correct = 0
    vqa_total = vqa_correct = 0
    err_program = err_module = err_other = 0
    nll_sum = 0.0
    nll_count = 0

    for case in dataset:
        ast = asts.get(case.id)
        if ast is None:
            ast = dsl.parse_program(case.program_text)
            asts[case.id] = ast
        truth = world.intermediate_truth(case, world_config)

        program_failed = False
        try:
            final = execute_argmax(ast, case.scenes, modules, params)
            final_ok = token_of(final) == case.label
        except VisprobError:
            program_failed = True
            final_ok = False

        case_module_wrong = False
        for stmt in ast.statements:
            if stmt.module is dsl.ModuleKind.LOC:
                region = truth[stmt.var_arg("image")]
                scene = case.scenes[region.image]
                pred = modules.loc.outcome_distribution(
                    scene, region, stmt.lit_arg("object"), params).argmax()
                ok = set(pred.cells) == set(truth[stmt.target].cells)
                loc_total += 1
                loc_correct += ok
                case_module_wrong |= not ok
            elif stmt.module is dsl.ModuleKind.VQA:
                region = truth[stmt.var_arg("image")]
                scene = case.scenes[region.image]
                pred = modules.vqa.answer_distribution(
                    scene, region, stmt.lit_arg("question"), params).argmax()
                ok = token_of(pred) == token_of(truth[stmt.target])
                vqa_total += 1
                vqa_correct += ok
                case_module_wrong |= not ok

        if final_ok:
            final_correct += 1
        elif program_failed:
            err_program += 1
        elif case_module_wrong:
            err_module += 1
        else:
            err_other += 1

        if with_nll:
            try:
                pred_dist = infer(mode, ast, case.scenes, modules, params)
                p = 0.0
                for v, q in zip(pred_dist.support, pred_dist.probs):
                    if token_of(v) == case.label:
                        p = q.value if isinstance(q, DiffScalar) else float(q)
                        break
                nll_sum += -math.log(max(p, CLAMP_FLOOR))
                nll_count += 1
            except VisprobError:
                pass

    return EvalResult(
        n=n,
        acc_final=final_correct / n if n else 0.0,
        acc_loc=loc_correct / loc_total if loc_total else None,
        acc_vqa=vqa_correct / vqa_total if vqa_total else None,
        mean_nll=nll_sum / nll_count if nll_count else None,
        err_program=err_program,
        err_module=err_module,
        err_other=err_other,
        n_loc=loc_total,
        n_vqa=vqa_total,
    )


# --- training loop ----------------------------------------------------------------------


def train(config: TrainConfig, dataset: list[world.CaseRecord],
          modules: ModuleSet, params: ParamStore,
          world_config: world.WorldConfig,
          eval_dataset: list[world.CaseRecord] | None = None,
          out_dir: str | Path | None = None
          ) -> tuple[ParamStore, list[MetricsRow]]:
    """Staged outcome-supervised training; returns final params and metrics.

    Stage k trains on every case whose visual-step count is at most the k-th
    threshold (stages are cumulative). With the curriculum disabled, a single
    stage covers the full threshold range for the same total epoch budget.
    Per-example inference failures are skipped and counted, never fatal.
    """
    config.validate()
    rng = random.Random(derive_seed(config.seed, "shuffle"))
    opt = make_optimizer(config.optimizer)
    t0 = time.perf_counter()

    train_set = dataset
    if config.disruption.fraction > 0.0:
        train_set = world.disrupt_programs(dataset, config.disruption.fraction,
                                           config.disruption.seed, world_config)
    eval_set = eval_dataset if eval_dataset is not None else dataset

    asts: dict[str, dsl.ProgramAst] = {}

    def ast_of(case: world.CaseRecord) -> dsl.ProgramAst:
        ast = asts.get(case.id)
        if ast is None:
            ast = dsl.parse_program(case.program_text)
            asts[case.id] = ast
        return ast

    if config.curriculum_enabled:
        thresholds = list(config.stages)
        stage_epochs = config.epochs_per_stage
    else:
        thresholds = [max(config.stages)]
        stage_epochs = config.epochs_per_stage * len(config.stages)

    rows: list[MetricsRow] = []

    def seconds() -> float:
        return 0.0 if config.determinism else time.perf_counter() - t0

    def add_row(epoch: int, stage: int, loss: float | None, skipped: int,
                stage_end: bool = False) -> None:
        cadence = config.eval_cadence
        do_eval = cadence > 0 and (epoch == 0 or stage_end or epoch % cadence == 0)
        if do_eval:
            res = evaluate(eval_set, modules, params, world_config,
                           mode=config.mode, with_nll=False, _ast_cache=asts)
            rows.append(MetricsRow(epoch, stage, loss, res.acc_final,
                                   res.acc_loc, res.acc_vqa, res.err_program,
                                   res.err_module, res.err_other, seconds(),
                                   skipped))
        else:
            rows.append(MetricsRow(epoch, stage, loss, None, None, None,
                                   None, None, None, seconds(), skipped))

    add_row(0, 0, None, 0)

    global_epoch = 0
    for stage_no, threshold in enumerate(thresholds, start=1):
        stage_cases = [c for c in train_set
                       if c.meta.num_visual_steps <= threshold]
        for epoch_in_stage in range(stage_epochs):
            global_epoch += 1
            order = list(range(len(stage_cases)))
            rng.shuffle(order)
            loss_sum = 0.0
            n_seen = 0
            skipped = 0
            for start in range(0, len(order), config.batch_size):
                batch_ids = order[start:start + config.batch_size]
                tape = Tape()
                entries: list[tuple[Categorical, str]] = []
                with world.training_guard():
                    for i in batch_ids:
                        case = stage_cases[i]
                        try:
                            pred = infer(config.mode, ast_of(case), case.scenes,
                                         modules, params, tape)
                            entries.append((pred, case.label))
                        except VisprobError:
                            skipped += 1
                    if not entries:
                        continue
                    loss = nll_loss(entries, tape)
                    grads = tape.backward(loss, params)
                    params = opt.step(params, grads)
                loss_sum += loss.value * len(entries)
                n_seen += len(entries)
            mean_loss = loss_sum / n_seen if n_seen else None
            add_row(global_epoch, stage_no, mean_loss, skipped,
                    stage_end=epoch_in_stage == stage_epochs - 1)
        if out_dir is not None:
            path = Path(out_dir) / f"checkpoint-stage{stage_no}.json"
            params.save(path)
    if out_dir is not None:
        params.save(Path(out_dir) / "checkpoint-final.json")
    return params, rows
