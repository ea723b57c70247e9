"""Corruption operators and meta-learned augmentation for uncertainty reduction."""

from .controller import (Controller, ControllerState, build_controller, controller_forward,
                         controller_step)
from .corruptions import CORRUPTIONS, CorruptionOp, all_ops, apply_corruption, corrupt_set
from .policy import (AugmentConfig, MixDecision, apply_chain, build_chain, chain_outputs, js_consistency,
                     js_logits, mix, mix_tensor, split_ops)
from .train import UncerHistory, inner_update, joint_update, meta_update, train_uncer

__all__ = [
    "AugmentConfig", "CORRUPTIONS", "Controller", "ControllerState", "CorruptionOp", "MixDecision",
    "UncerHistory", "all_ops", "apply_chain", "apply_corruption", "build_chain", "build_controller",
    "chain_outputs", "controller_forward", "controller_step", "corrupt_set", "inner_update", "joint_update",
    "js_consistency", "js_logits", "meta_update", "mix", "mix_tensor", "split_ops", "train_uncer",
]
