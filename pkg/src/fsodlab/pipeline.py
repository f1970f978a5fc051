"""Glue between dataset, trainer, and evaluator: the pieces every command
(and the acceptance suite) composes."""

from __future__ import annotations

import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .detector import FewShotDetector, ModelConfig, load_checkpoint, save_checkpoint
from .episodic import EpisodePool, build_support_input
from .evaluator import EvalReport, DetectionResult, evaluate_items
from .synthdata import (
    ClassSplit, DatasetManifest, DatasetSplits, load_image, randomly_flipped_view,
    split_dataset,
)
from .trainer import TrainConfig, TrainResult, build_model, train_phase


def model_config_for(manifest: DatasetManifest, overrides: Optional[dict] = None) -> ModelConfig:
    d = {"num_classes": len(manifest.class_names)}
    if overrides:
        d.update(overrides)
    return ModelConfig.from_dict(d)


def build_support_features(model: FewShotDetector, manifest: DatasetManifest,
                           splits: DatasetSplits, support_size: int = 64,
                           ) -> Dict[int, torch.Tensor]:
    """Per-class prototypes from the K-shot fine-tune instances (K-shot mean)."""
    records = {rec.image_id: rec for rec in manifest.images}
    inputs = []
    for ref in splits.finetune_instances:
        rec = records[ref.image_id]
        box = rec.annotations[ref.ann_index]
        inputs.append(build_support_input(load_image(manifest, rec), box,
                                          out_size=support_size))
    model.eval()
    with torch.no_grad():
        return model.encode_support(inputs)


def test_items(manifest: DatasetManifest, splits: DatasetSplits,
               flip_seed: Optional[int] = None):
    """Test images with annotations; ``flip_seed`` applies one random flip
    per image (the orientation-shifted test condition)."""
    if flip_seed is not None:
        return randomly_flipped_view(manifest, splits.test_images, flip_seed)
    return [(load_image(manifest, rec), rec.annotations) for rec in splits.test_images]


def train_one_phase(manifest: DatasetManifest, splits: DatasetSplits,
                    config: TrainConfig, model: Optional[FewShotDetector] = None,
                    model_overrides: Optional[dict] = None,
                    out_dir: Optional[str] = None,
                    base_checkpoint_meta: Optional[dict] = None,
                    track_param_hashes: bool = False,
                    ) -> Tuple[FewShotDetector, TrainResult]:
    if config.phase == "base":
        pool = EpisodePool.from_records(
            manifest, splits.base_images, class_ids=sorted(splits.split.base_class_ids)
        )
        if model is None:
            model = build_model(model_config_for(manifest, model_overrides), config.seed)
    else:
        pool = EpisodePool.from_instances(manifest, splits.finetune_instances)
        if model is None:
            raise ValueError("finetune needs the base-trained model")
        config = replace(config, k_shot=min(config.k_shot, splits.k_shots))
    result = train_phase(model, pool, config, out_dir=out_dir,
                         base_checkpoint_meta=base_checkpoint_meta,
                         track_param_hashes=track_param_hashes)
    return model, result


def evaluate_model(model: FewShotDetector, manifest: DatasetManifest,
                   splits: DatasetSplits, flip_test_seed: Optional[int] = None,
                   support_size: int = 64,
                   ) -> Tuple[EvalReport, List[DetectionResult]]:
    support = build_support_features(model, manifest, splits, support_size=support_size)
    items = test_items(manifest, splits, flip_seed=flip_test_seed)
    return evaluate_items(model, items, support, splits.split)


def run_two_phase(manifest: DatasetManifest, splits: DatasetSplits,
                  base_cfg: TrainConfig, finetune_cfg: TrainConfig,
                  model_overrides: Optional[dict] = None,
                  out_dir: Optional[str] = None,
                  flip_test_seed: Optional[int] = None,
                  ) -> Tuple[FewShotDetector, EvalReport]:
    """Base training, fine-tuning, evaluation: the full protocol."""
    base_dir = os.path.join(out_dir, "base") if out_dir else None
    ft_dir = os.path.join(out_dir, "finetune") if out_dir else None
    model, _ = train_one_phase(manifest, splits, base_cfg,
                               model_overrides=model_overrides, out_dir=base_dir)
    meta = {"phase": "base", "iteration": base_cfg.iterations}
    model, _ = train_one_phase(manifest, splits, finetune_cfg, model=model,
                               out_dir=ft_dir, base_checkpoint_meta=meta)
    report, _ = evaluate_model(model, manifest, splits, flip_test_seed=flip_test_seed)
    return model, report
