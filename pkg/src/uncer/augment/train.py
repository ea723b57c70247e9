"""Meta-learned augmentation training and its joint-loss ablation.

Per batch ``t`` of an epoch (meta variant):

1. split the operations into seen and unseen sets;
2. the controller maps the batch embedding to ``(w_t, m_t)``;
3. ``width`` chains of seen operations are mixed with the original batch;
4. ``inner_steps`` Adam steps on the decoder (controller frozen);
5. the same decision mixes unseen-operation chains and one Adam step on the
   controller follows the gradient of the meta loss through the mixing
   weights, with the updated decoder held fixed (first-order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..decoder import DecoderModel, _xy, check_labels, embed, epoch_batches, forward
from ..optim import AdamState, adam_step
from ..rng import as_stream
from ..tensor import Tape
from .controller import Controller, ControllerState, build_controller, controller_forward, controller_step
from .corruptions import all_ops
from .policy import AugmentConfig, chain_outputs, js_logits, mix, mix_tensor, split_ops


@dataclass
class UncerHistory:
    train_loss: list = field(default_factory=list)
    meta_loss: list = field(default_factory=list)
    mix_m: list = field(default_factory=list)
    mix_w: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


def augmented_loss(model: DecoderModel, x_aug, x_orig, y, lam: float, stream):
    """Cross-entropy on the augmented batch plus ``lam`` times the JS term to the original."""
    logits = forward(model, x_aug, stream=stream)
    loss = T.cross_entropy(logits, y)
    if lam > 0:
        ref = forward(model, x_orig, stream=stream.child("reference"))
        loss = T.add(loss, T.mul(js_logits(logits, ref), float(lam)))
    return loss


def inner_update(model: DecoderModel, opt: AdamState, x_mixed, x_orig, y, lam: float, alpha: float,
                 steps: int, stream) -> float:
    """``steps`` Adam steps on the decoder; returns the loss before the last step."""
    if steps < 1:
        raise ValueError(f"inner_steps must be >= 1, got {steps}")
    model.train()
    params = model.parameters()
    loss = None
    for j in range(steps):
        s = stream if j == 0 else stream.child(j)
        with Tape() as tape:
            loss = augmented_loss(model, x_mixed, x_orig, y, lam, s)
            grads = T.grad(loss, params, tape)
        adam_step(params, grads, opt, lr=alpha)
    return loss.item()


class _frozen:
    """Temporarily stop gradient tracking on a set of tensors."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p, f in zip(self.params, self.flags):
            p.requires_grad = f
        return False


def meta_loss_tensor(ctrl: Controller, state: ControllerState, embedding, model: DecoderModel, x_orig, y,
                     unseen_chains, lam: float):
    """Meta loss at the (fixed) decoder, as a function of the controller parameters."""
    w, m, _, _ = controller_forward(ctrl, state, embedding)
    x_hat = mix_tensor(x_orig, unseen_chains, w, m)
    logits = forward(model, x_hat)
    loss = T.cross_entropy(logits, y)
    if lam > 0:
        ref = forward(model, x_orig)
        loss = T.add(loss, T.mul(js_logits(logits, ref), float(lam)))
    return loss


def meta_update(ctrl: Controller, opt: AdamState, state: ControllerState, embedding, model: DecoderModel,
                x_orig, y, unseen_chains, lam: float, lr: float) -> float:
    """One Adam step on the controller; decoder parameters and statistics are untouched."""
    prev = model.mode
    model.eval()
    params = ctrl.parameters()
    with _frozen(model.parameters()):
        with Tape() as tape:
            loss = meta_loss_tensor(ctrl, state, embedding, model, x_orig, y, unseen_chains, lam)
            grads = T.grad(loss, params, tape)
    adam_step(params, grads, opt, lr=lr)
    model.mode = prev
    return loss.item()


def joint_update(model: DecoderModel, opt: AdamState, ctrl: Controller, ctrl_opt: AdamState, state, embedding,
                 x_orig, y, chains, lam: float, alpha: float, meta_lr: float, stream) -> float:
    """One combined step: a single loss updates the decoder and the controller together."""
    model.train()
    dec = model.parameters()
    cp = ctrl.parameters()
    with Tape() as tape:
        w, m, _, _ = controller_forward(ctrl, state, embedding)
        x_mix = mix_tensor(x_orig, chains, w, m)
        loss = augmented_loss(model, x_mix, x_orig, y, lam, stream)
        grads = T.grad(loss, dec + cp, tape)
    adam_step(dec, grads[:len(dec)], opt, lr=alpha)
    adam_step(cp, grads[len(dec):], ctrl_opt, lr=meta_lr)
    return loss.item()


def train_uncer(model: DecoderModel, controller: Controller | None, dataset, cfg: AugmentConfig = AugmentConfig(),
                epochs: int = 40, stream=None, ops=None, batch_size: int = 64, variant: str = "meta"):
    """Train decoder and controller; returns ``(model, controller, history)``.

    ``variant="joint"`` drops the seen/unseen split: chains use every
    operation and one loss updates both networks per batch.
    """
    if variant not in ("meta", "joint"):
        raise ValueError(f"variant must be 'meta' or 'joint', got {variant!r}")
    stream = as_stream(stream if stream is not None else model.stream)
    ops = list(ops) if ops is not None else all_ops(cfg.severity)
    if variant == "meta" and not 0 < cfg.seen_count < len(ops):
        raise ValueError(f"seen_count {cfg.seen_count} must lie in (0, {len(ops)})")
    x, y = _xy(dataset)
    check_labels(y, model.config.n_classes, "training set")
    if controller is None:
        controller = build_controller(model.config.pointwise_filters, cfg.hidden_dim, cfg.width, stream.child("controller"))
    if controller.embedding_dim != model.config.pointwise_filters or controller.width != cfg.width:
        raise ValueError("controller dimensions do not match the decoder features or the augmentation width")
    opt = AdamState.for_params(model.parameters())
    ctrl_opt = AdamState.for_params(controller.parameters())
    history = UncerHistory()
    for epoch in range(epochs):
        state = controller.initial_state()
        losses, metas, ms, ws = [], [], [], []
        for step, idx in enumerate(epoch_batches(len(x), batch_size, stream, epoch)):
            xb, yb = x[idx], y[idx]
            aug = stream.child("augment", epoch, step)
            dropout = stream.child("dropout", epoch, step)
            emb = embed(model, xb)
            if variant == "joint":
                chains = chain_outputs(ops, xb, cfg.depth, cfg.width, aug.child("all"))
                decision, nxt = controller_step(controller, state, emb)
                losses.append(joint_update(model, opt, controller, ctrl_opt, state, emb, xb, yb, chains, cfg.lam,
                                           cfg.inner_lr, cfg.meta_lr, dropout))
            else:
                seen, unseen = split_ops(ops, cfg.seen_count, aug.child("split"))
                decision, nxt = controller_step(controller, state, emb)
                x_mixed = mix(xb, chain_outputs(seen, xb, cfg.depth, cfg.width, aug.child("seen")), decision)
                losses.append(inner_update(model, opt, x_mixed, xb, yb, cfg.lam, cfg.inner_lr, cfg.inner_steps,
                                           dropout))
                unseen_chains = chain_outputs(unseen, xb, cfg.depth, cfg.width, aug.child("unseen"))
                metas.append(meta_update(controller, ctrl_opt, state, emb, model, xb, yb, unseen_chains, cfg.lam,
                                         cfg.meta_lr))
            ms.append(decision.m)
            ws.append(decision.w)
            state = nxt
        history.train_loss.append(float(np.mean(losses)))
        history.meta_loss.append(float(np.mean(metas)) if metas else float("nan"))
        history.mix_m.append(float(np.mean(ms)))
        history.mix_w.append(np.mean(ws, axis=0).tolist())
    model.eval()
    return model, controller, history
