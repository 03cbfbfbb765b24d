"""End-to-end training orchestration.

A run has four phases: (a) warmup environment steps under uniformly random
rankings, collecting states for the codec corpus; (b) codec pretraining,
after which the decoder is frozen and the encoder cloned for fine-tuning;
(c) the main loop, where each step snapshots statistics, encodes, distills,
ranks, mixes, updates the segmentation learner, scores rewards, and records
the transition, with agent update rounds interleaved every
``update_period`` steps; (d) a final held-out evaluation.

Every random draw flows through one seeded generator, so a (config, seed)
pair fully determines the metrics stream, and checkpoints capture enough
state to resume bit-identically.
"""

from __future__ import annotations

import json
import pickle
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, Tensor, backward, restore_params, save_params, sgd_step
from .config import RunConfig, config_text, read_config
from .distill import distill_forward, init_distill_params
from .metrics import MetricsWriter
from .policy import (
    ClassRanking,
    CriticBank,
    FairnessConfig,
    RingBuffer,
    TransitionRecord,
    init_policy_params,
    policy_gradient_update,
    policy_logits,
    ranking_log_prob,
    sample_ranking,
)
from .rewards import class_reward, compute_prototypes, reward_bounds
from .segworld import (
    ToyLearner,
    WorldTelemetry,
    build_mix_mask,
    evaluate,
    generate_scene,
    mix_pair,
    seg_loss_and_update,
)
from .statecodec import (
    CodecConfig,
    assemble_state,
    clone_params,
    dump_states,
    encode_graph,
    encode_graph_batch,
    freeze_params,
    make_codec_model,
    pretrain_codec,
    recon_loss,
)
from .autodiff import ops

CHECKPOINT_DIR = "checkpoint"
EVAL_STREAM = 0xE7A1


class TrainingError(RuntimeError):
    """A stage failure, annotated with the step index and stage name."""


@dataclass
class FinalReport:
    mean_accuracy: float
    per_class_accuracy: list
    accuracy_std: float
    wall_time_s: float
    steps: int
    scheduler: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir: str | Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(config_text(cfg))
        self.metrics = MetricsWriter(self.out / "metrics.txt")

        self.rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        self.world = cfg.env
        self.codec_cfg = CodecConfig(
            state_dim=cfg.state_dim,
            components=cfg.codec_components,
            hidden=cfg.codec_hidden,
            latent_channels=cfg.distill.in_channels,
            latent_height=cfg.distill.height,
            latent_width=cfg.distill.width,
        )
        self.learner = ToyLearner.initial(
            self.world.num_classes, self.world.feature_dim,
            self.world.temperature)
        self.telemetry = WorldTelemetry(self.world.num_classes)

        # parameter groups, created in a fixed order for rng stability
        self.codec = make_codec_model(self.codec_cfg, self.rng)
        self.encoder_clone = clone_params(self.codec.encoder)
        self.frozen_decoder = freeze_params(self.codec.decoder)
        self.distill_params = init_distill_params(cfg.distill, self.rng)
        self.policy_params = init_policy_params(cfg.latent_dim,
                                                self.world.num_classes)
        self.critics = CriticBank.create(cfg.latent_dim,
                                         self.world.num_classes,
                                         discount=cfg.discount)
        self.projection: dict[str, Tensor] | None = None
        if cfg.bypass_encoder:
            scale = 1.0 / np.sqrt(cfg.state_dim)
            self.projection = {
                "weight": Tensor(self.rng.normal(
                    0.0, scale, (cfg.latent_dim, cfg.state_dim)),
                    requires_grad=True),
                "bias": Tensor(np.zeros(cfg.latent_dim), requires_grad=True),
            }

        # Deterministic encoding differentiates through the trunk and mean
        # head only; the categorical and log-variance heads keep their
        # pretrained clone values and just steer the component argmax.
        tuned_clone = {name: self.encoder_clone[name] for name in
                       ("trunk.weight", "trunk.bias",
                        "mean.weight", "mean.bias")}
        self.agent_params = ParamSet()
        self.agent_params.merge(self.policy_params, "policy/")
        if not cfg.bypass_distiller:
            self.agent_params.merge(self.distill_params, "distill/")
        if cfg.bypass_encoder:
            self.agent_params.merge(self.projection, "projection/")
        else:
            self.agent_params.merge(tuned_clone, "encoder_clone/")
        self.recon_params: ParamSet | None = None
        if not cfg.bypass_encoder:
            self.recon_params = ParamSet()
            self.recon_params.merge(tuned_clone)

        self.transitions = RingBuffer(cfg.buffer_capacity)
        self.states = RingBuffer(cfg.state_buffer_capacity)
        lo, hi = reward_bounds(self.world.num_classes, cfg.reward_balance)
        self.fairness = FairnessConfig.for_reward_bounds(
            lo, hi, alpha=cfg.fairness_alpha, value_floor=cfg.value_floor)
        self.step_index = 0
        self.pretrained = False
        self._setup_emitted = False
        self._stage = "init"

    # ------------------------------------------------------------------
    # differentiable pipeline pieces

    def _latent_graph(self, state: np.ndarray) -> Tensor:
        if self.cfg.bypass_encoder:
            return ops.linear(Tensor(state), self.projection["weight"],
                              self.projection["bias"])
        return encode_graph(state, self.encoder_clone, self.codec_cfg)

    def _key_graph(self, state: np.ndarray) -> Tensor:
        z = self._latent_graph(state)
        if self.cfg.bypass_distiller:
            return z
        latent_map = ops.reshape(z, self.codec_cfg.latent_shape)
        refined = distill_forward(latent_map, self.cfg.distill,
                                  self.distill_params)
        return ops.reshape(refined, (self.cfg.latent_dim,))

    def _recompute_logits(self, states: np.ndarray) -> Tensor:
        """Batched live logits (B, C) for the policy-gradient update."""
        count = states.shape[0]
        if self.cfg.bypass_encoder:
            z = ops.add(
                ops.matmul(Tensor(states),
                           ops.transpose(self.projection["weight"])),
                self.projection["bias"])
        else:
            z = encode_graph_batch(states, self.encoder_clone, self.codec_cfg)
        if not self.cfg.bypass_distiller:
            maps = ops.reshape(z, (count,) + self.codec_cfg.latent_shape)
            refined = distill_forward(maps, self.cfg.distill,
                                      self.distill_params)
            z = ops.reshape(refined, (count, self.cfg.latent_dim))
        return ops.add(
            ops.matmul(z, ops.transpose(self.policy_params["head.weight"])),
            self.policy_params["head.bias"])

    # ------------------------------------------------------------------
    # scheduling

    def _rank(self, key_flat: np.ndarray) -> ClassRanking:
        cfg = self.cfg
        num_classes = self.world.num_classes
        if cfg.scheduler == "learned":
            return sample_ranking(key_flat, self.policy_params, self.rng)
        if cfg.scheduler == "random":
            order = tuple(int(c) for c in self.rng.permutation(num_classes))
        elif cfg.scheduler == "easy_to_hard":
            order = tuple(int(c) for c in
                          np.argsort(-self.telemetry.accuracy, kind="stable"))
        elif cfg.scheduler == "hard_only":
            order = tuple(int(c) for c in
                          np.argsort(self.telemetry.accuracy, kind="stable"))
        else:  # fixed_order, validated by the config
            order = cfg.fixed_order
        logits = policy_logits(key_flat, self.policy_params)
        return ClassRanking(order=order,
                            log_prob=ranking_log_prob(order, logits),
                            logits=logits)

    def _random_ranking(self) -> ClassRanking:
        num_classes = self.world.num_classes
        order = tuple(int(c) for c in self.rng.permutation(num_classes))
        logits = np.zeros(num_classes)
        return ClassRanking(order=order,
                            log_prob=ranking_log_prob(order, logits),
                            logits=logits)

    # ------------------------------------------------------------------
    # environment interaction shared by warmup and main steps

    def _environment_round(self, ranking: ClassRanking) -> np.ndarray:
        """Mix, update the learner, score rewards; returns mapped rewards."""
        cfg = self.cfg
        self._stage = "mix"
        scenes = [generate_scene(self.world, self.rng)
                  for _ in range(cfg.scenes_per_step)]
        masks = [build_mix_mask(ranking, scene.source_labels, cfg.paste_half)
                 for scene in scenes]
        mixed = [mix_pair(scene, mask, self.learner)
                 for scene, mask in zip(scenes, masks)]
        self.telemetry.update_exposure(masks)
        pasted = sorted({c for m in masks for c in m.low_classes})
        self.metrics.emit(
            self.step_index, "mix",
            low="-".join(str(c) for c in pasted),
            low_size_mean=float(np.mean([len(m.low_classes) for m in masks])),
            events=self.telemetry.mix_events)

        self._stage = "seg_update"
        report = seg_loss_and_update(scenes, mixed, self.learner,
                                     cfg.source_loss_weight,
                                     cfg.mixed_loss_weight, cfg.learner_lr)
        self.telemetry.update_seg(report)
        self.metrics.emit(self.step_index, "seg_update", total=report.total,
                          source_ce=report.source_ce, mixed_ce=report.mixed_ce)

        self._stage = "reward"
        src_features = np.concatenate([s.source_features for s in scenes],
                                      axis=2)
        src_labels = np.concatenate([s.source_labels for s in scenes], axis=1)
        tgt_features = np.concatenate([s.target_features for s in scenes],
                                      axis=2)
        pseudo = np.concatenate(
            [self.learner.predict(s.target_features) for s in scenes], axis=1)
        src_table = compute_prototypes(src_features, src_labels, "source")
        tgt_table = compute_prototypes(tgt_features, pseudo, "target")
        raw = class_reward(src_table, tgt_table, self.world.num_classes,
                           cfg.reward_balance)
        mapped = (raw.values + self.fairness.reward_shift) \
            * self.fairness.reward_scale
        self.telemetry.update_alignment(src_table, tgt_table)
        self.telemetry.update_target(self.learner, scenes)
        reward_fields = {f"r{c}": float(mapped[c])
                         for c in range(self.world.num_classes)}
        self.metrics.emit(self.step_index, "reward",
                          raw_mean=float(raw.values.mean()), **reward_fields)
        return mapped

    def _state_snapshot(self) -> np.ndarray:
        return assemble_state(self.telemetry.snapshot(self.learner))

    def _warmup_step(self) -> None:
        self._stage = "state"
        state = self._state_snapshot()
        self.metrics.emit(self.step_index, "state",
                          norm=float(np.linalg.norm(state)))
        self._stage = "rank"
        ranking = self._random_ranking()
        self.metrics.emit(self.step_index, "rank",
                          order="-".join(str(c) for c in ranking.order),
                          log_prob=ranking.log_prob)
        self._environment_round(ranking)
        self._stage = "state_record"
        self.states.push(state)
        self.metrics.emit(self.step_index, "state_record",
                          states=len(self.states))

    def _main_step(self) -> None:
        self._stage = "state"
        state = self._state_snapshot()
        self.metrics.emit(self.step_index, "state",
                          norm=float(np.linalg.norm(state)))

        self._stage = "encode"
        latent = self._latent_graph(state).values
        self.metrics.emit(self.step_index, "encode",
                          norm=float(np.linalg.norm(latent)))

        self._stage = "distill"
        key = self._key_graph(state).values
        self.metrics.emit(self.step_index, "distill",
                          norm=float(np.linalg.norm(key)))

        self._stage = "rank"
        ranking = self._rank(key)
        self.metrics.emit(self.step_index, "rank",
                          order="-".join(str(c) for c in ranking.order),
                          log_prob=ranking.log_prob)

        mapped = self._environment_round(ranking)

        self._stage = "record"
        state_next = self._state_snapshot()
        key_next = self._key_graph(state_next).values
        self.transitions.push(TransitionRecord(
            state=state, key=key, ranking=ranking, reward=mapped,
            state_next=state_next, key_next=key_next))
        self.metrics.emit(self.step_index, "record",
                          buffer=len(self.transitions))
        self._stage = "state_record"
        self.states.push(state)
        self.metrics.emit(self.step_index, "state_record",
                          states=len(self.states))

    # ------------------------------------------------------------------
    # learning phases

    def _pretrain(self) -> None:
        self._stage = "pretrain"
        cfg = self.cfg
        corpus = np.asarray(self.states.snapshot())
        if corpus.size == 0:
            # degenerate schedules (warmup_steps = 0) train on defaults
            corpus = self._state_snapshot()[None, :]
        dump_states(list(corpus), self.out / "pretrain_states.txt")
        losses = pretrain_codec(self.codec, corpus, cfg.pretrain_steps,
                                cfg.pretrain_batch, cfg.codec_lr, self.rng,
                                max_grad_norm=cfg.max_grad_norm)
        for k, loss in enumerate(losses):
            if k % 25 == 0 or k == len(losses) - 1:
                self.metrics.emit(self.step_index, "pretrain", iteration=k,
                                  loss=loss)
        # freeze the decoder, clone the pretrained encoder for fine-tuning
        for name, tensor in self.frozen_decoder.items():
            tensor.values[...] = self.codec.decoder[name].values
        for name, tensor in self.encoder_clone.items():
            tensor.values[...] = self.codec.encoder[name].values
        self.pretrained = True
        self.metrics.flush()

    def _agent_round(self) -> None:
        cfg = self.cfg
        if cfg.scheduler != "learned":
            return
        if len(self.transitions) < cfg.agent_batch:
            return
        self._stage = "agent_update"
        for _ in range(cfg.agent_iterations):
            batch = self.transitions.sample(cfg.agent_batch, self.rng)
            report = policy_gradient_update(
                batch, self.agent_params, self._recompute_logits,
                self.critics, self.fairness, cfg.policy_lr, cfg.critic_lr,
                cfg.weight_decay, cfg.max_grad_norm)
            recon_value = -1.0
            if self.recon_params is not None and len(self.states) > 0:
                states = self.states.sample(
                    min(cfg.agent_batch, len(self.states)), self.rng)
                recon = recon_loss(states, self.encoder_clone,
                                   self.frozen_decoder, self.codec_cfg)
                backward(recon)
                sgd_step(self.recon_params, cfg.finetune_lr, cfg.weight_decay)
                recon_value = recon.item()
            self.metrics.emit(self.step_index, "agent_update",
                              surrogate=report.surrogate,
                              critic_mse=report.critic_mse,
                              weighted_advantage=report.mean_weighted_advantage,
                              grad_norm=report.policy_grad_norm,
                              weight_mean=report.fairness_weight_mean,
                              recon=recon_value)
        self.metrics.flush()

    def _evaluate(self):
        self._stage = "evaluate"
        eval_rng = np.random.default_rng([self.cfg.seed, EVAL_STREAM])
        scenes = [generate_scene(self.world, eval_rng)
                  for _ in range(self.cfg.eval_scenes)]
        return evaluate(self.learner, scenes)

    def _emit_eval(self, report) -> None:
        fields = {f"acc{c}": float(report.per_class_accuracy[c])
                  for c in range(self.world.num_classes) if report.present[c]}
        self.metrics.emit(self.step_index, "eval",
                          mean_accuracy=report.mean_accuracy,
                          accuracy_std=report.accuracy_std, **fields)

    # ------------------------------------------------------------------
    # driving

    def run(self, stop_after: int | None = None) -> FinalReport | None:
        """Advance to ``stop_after`` env steps (or to completion).

        Returns the final report when the configured horizon is reached,
        otherwise None (the caller typically checkpoints and resumes later).
        """
        cfg = self.cfg
        horizon = cfg.total_steps if stop_after is None \
            else min(stop_after, cfg.total_steps)
        started = time.perf_counter()
        if self.step_index == 0 and not self._setup_emitted:
            self._setup_emitted = True
            self.metrics.emit(0, "setup", scheduler=cfg.scheduler,
                              reward_shift=self.fairness.reward_shift,
                              reward_scale=self.fairness.reward_scale,
                              fairness_alpha=self.fairness.alpha)
        try:
            while self.step_index < horizon:
                if self.step_index < cfg.warmup_steps:
                    self._warmup_step()
                    self.step_index += 1
                    continue
                if not self.pretrained:
                    self._pretrain()
                self._main_step()
                self.step_index += 1
                main_done = self.step_index - cfg.warmup_steps
                if main_done % cfg.update_period == 0:
                    self._agent_round()
                if cfg.eval_period and main_done % cfg.eval_period == 0:
                    self._emit_eval(self._evaluate())
        except Exception as exc:
            self.metrics.close()
            raise TrainingError(
                f"step {self.step_index} stage {self._stage}: {exc}") from exc

        if self.step_index < cfg.total_steps:
            self.metrics.flush()
            return None

        if not self.pretrained:  # degenerate total_steps == warmup_steps
            self._pretrain()
        final = self._evaluate()
        self._emit_eval(final)
        self.metrics.close()
        report = FinalReport(
            mean_accuracy=final.mean_accuracy,
            per_class_accuracy=[
                float(final.per_class_accuracy[c]) if final.present[c] else None
                for c in range(self.world.num_classes)],
            accuracy_std=final.accuracy_std,
            wall_time_s=time.perf_counter() - started,
            steps=self.step_index,
            scheduler=cfg.scheduler,
            seed=cfg.seed,
        )
        (self.out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True))
        self.save_checkpoint(self.out / CHECKPOINT_DIR)
        return report

    # ------------------------------------------------------------------
    # checkpointing

    def _named_tensors(self) -> dict[str, Tensor]:
        tensors: dict[str, Tensor] = {}
        for name, tensor in self.policy_params.items():
            tensors[f"policy/{name}"] = tensor
        for name, tensor in self.distill_params.items():
            tensors[f"distill/{name}"] = tensor
        for name, tensor in self.encoder_clone.items():
            tensors[f"clone/{name}"] = tensor
        if self.projection is not None:
            for name, tensor in self.projection.items():
                tensors[f"projection/{name}"] = tensor
        tensors["critic/weight"] = self.critics.weight
        tensors["critic/bias"] = self.critics.bias
        for name, tensor in self.codec.encoder.items():
            tensors[f"codec/encoder/{name}"] = tensor
        for name, tensor in self.codec.decoder.items():
            tensors[f"codec/decoder/{name}"] = tensor
        tensors["codec/prior/means"] = self.codec.prior_means
        return tensors

    def save_checkpoint(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.ini").write_text(config_text(self.cfg))
        tensors = dict(self._named_tensors())
        tensors["learner/prototypes"] = Tensor(self.learner.prototypes,
                                               requires_grad=True)
        save_params(tensors, directory / "params")
        state = {
            "step_index": self.step_index,
            "pretrained": self.pretrained,
            "rng_state": self.rng.bit_generator.state,
            "telemetry": {
                "loss": self.telemetry.loss,
                "accuracy": self.telemetry.accuracy,
                "domain_cosine": self.telemetry.domain_cosine,
                "entropy": self.telemetry.entropy,
                "exposure_counts": self.telemetry.exposure_counts,
                "mix_events": self.telemetry.mix_events,
            },
            "transitions": self.transitions.snapshot(),
            "states": self.states.snapshot(),
            "agent_step": self.agent_params.step,
        }
        with open(directory / "trainer.pkl", "wb") as handle:
            pickle.dump(state, handle)
        return directory

    @classmethod
    def load(cls, checkpoint_dir: str | Path,
             out_dir: str | Path) -> "Trainer":
        checkpoint_dir = Path(checkpoint_dir)
        cfg = read_config(checkpoint_dir / "config.ini")
        trainer = cls(cfg, out_dir)
        named = trainer._named_tensors()
        proto = Tensor(np.zeros_like(trainer.learner.prototypes),
                       requires_grad=True)
        named["learner/prototypes"] = proto
        restore_params(named, checkpoint_dir / "params")
        trainer.learner.prototypes = proto.values.copy()
        with open(checkpoint_dir / "trainer.pkl", "rb") as handle:
            state = pickle.load(handle)
        trainer.step_index = state["step_index"]
        trainer.pretrained = state["pretrained"]
        trainer.rng.bit_generator.state = state["rng_state"]
        tele = state["telemetry"]
        trainer.telemetry.loss = tele["loss"]
        trainer.telemetry.accuracy = tele["accuracy"]
        trainer.telemetry.domain_cosine = tele["domain_cosine"]
        trainer.telemetry.entropy = tele["entropy"]
        trainer.telemetry.exposure_counts = tele["exposure_counts"]
        trainer.telemetry.mix_events = tele["mix_events"]
        for record in state["transitions"]:
            trainer.transitions.push(record)
        for vec in state["states"]:
            trainer.states.push(vec)
        trainer.agent_params.step = state["agent_step"]
        if trainer.pretrained:
            for name, tensor in trainer.frozen_decoder.items():
                tensor.values[...] = trainer.codec.decoder[name].values
        return trainer


def run_training(cfg: RunConfig, out_dir: str | Path) -> FinalReport:
    """Train to completion and return the final report."""
    trainer = Trainer(cfg, out_dir)
    report = trainer.run()
    assert report is not None
    return report
