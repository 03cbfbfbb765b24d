"""Framework-free request handlers.

The CLI calls these directly; the HTTP app wraps them in background jobs.
All filesystem access happens on the host running the handler.
"""

from __future__ import annotations

import pickle
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..autodiff import load_params
from ..config import RunConfig, parse_config, read_config
from ..segworld import ToyLearner, evaluate, generate_scene
from ..statecodec import dump_states, load_state_dump
from ..suite import SuiteResult, run_baseline_suite
from ..training import CHECKPOINT_DIR, EVAL_STREAM, FinalReport, run_training
from .schemas import (
    DumpStateRequest,
    DumpStateResponse,
    EvalRequest,
    EvalResponse,
    RunReport,
    SuiteRequest,
    TrainRequest,
)


def resolve_config(config_path: str | None, config_text: str | None,
                   seed: int | None = None) -> RunConfig:
    if config_path is not None:
        cfg = read_config(config_path)
    else:
        cfg = parse_config(config_text or "")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _default_out(prefix: str) -> str:
    return tempfile.mkdtemp(prefix=f"schedlab_{prefix}_")


def handle_train(request: TrainRequest) -> tuple[RunReport, str]:
    cfg = resolve_config(request.config_path, request.config_text,
                         request.seed)
    out_dir = request.out_dir or _default_out("train")
    report: FinalReport = run_training(cfg, out_dir)
    return RunReport(**report.to_dict()), out_dir


def handle_suite(request: SuiteRequest) -> tuple[SuiteResult, str]:
    cfg = resolve_config(request.config_path, request.config_text)
    out_dir = request.out_dir or _default_out("suite")
    result = run_baseline_suite(cfg, request.seeds, request.schedulers,
                                out_dir, ablations=request.ablations,
                                jobs=request.jobs)
    return result, out_dir


def handle_eval(request: EvalRequest) -> EvalResponse:
    checkpoint = Path(request.checkpoint)
    if checkpoint.name != CHECKPOINT_DIR and (checkpoint / CHECKPOINT_DIR).is_dir():
        checkpoint = checkpoint / CHECKPOINT_DIR
    cfg_path = request.config_path or checkpoint / "config.ini"
    cfg = read_config(cfg_path)
    arrays = load_params(checkpoint / "params")
    if "learner/prototypes" not in arrays:
        raise ValueError(f"checkpoint {checkpoint} has no learner prototypes")
    learner = ToyLearner(prototypes=arrays["learner/prototypes"],
                         temperature=cfg.env.temperature)
    eval_rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    scenes = [generate_scene(cfg.env, eval_rng)
              for _ in range(cfg.eval_scenes)]
    report = evaluate(learner, scenes)
    return EvalResponse(
        mean_accuracy=report.mean_accuracy,
        per_class_accuracy=[
            float(report.per_class_accuracy[c]) if report.present[c] else None
            for c in range(cfg.env.num_classes)],
        accuracy_std=report.accuracy_std,
        scenes=len(scenes),
    )


def handle_dump_state(request: DumpStateRequest) -> DumpStateResponse:
    run_dir = Path(request.run_dir)
    out_path = Path(request.out_path) if request.out_path \
        else run_dir / "state_dump.txt"
    corpus = run_dir / "pretrain_states.txt"
    if corpus.is_file():
        states = load_state_dump(corpus)
        dump_states(list(states), out_path)
        return DumpStateResponse(path=str(out_path), states=len(states))
    trainer_pkl = run_dir / CHECKPOINT_DIR / "trainer.pkl"
    if trainer_pkl.is_file():
        with open(trainer_pkl, "rb") as handle:
            state = pickle.load(handle)
        states = state.get("states", [])
        if states:
            dump_states(states, out_path)
            return DumpStateResponse(path=str(out_path), states=len(states))
    raise ValueError(
        f"{run_dir} holds no pretraining corpus (no pretrain_states.txt and "
        "no populated state ring in its checkpoint)")
