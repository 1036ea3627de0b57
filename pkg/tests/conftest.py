"""Shared test helpers."""

import numpy as np

import egorep.objectives as O
from egorep.encoder import InteractionModel, MemoryBank, ModelConfig
from egorep.tensor import Tape, Tensor, constant


def micro_config(**overrides) -> ModelConfig:
    """Smallest configuration that exercises every architectural path:
    2 frames of 8x8 images, a 2-stage backbone, 2-layer LSTMs."""
    base = dict(
        image_size=8,
        k=2,
        backbone_channels=(2, 3),
        backbone_strides=(1, 2),
        blocks_per_stage=1,
        stem_stride=1,
        stem_pool=False,
        reducer_channels=2,
        lstm_hidden=4,
        lstm_layers=2,
        contrastive_dim=4,
        bank_size=8,
        tau=0.07,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build_micro_objective(seed=123, dtype=np.float64):
    """A float64 micro model plus a deterministic combined-loss builder.

    Returns (build_loss, named_params).  The loss touches every head: gaze
    regression on the decoded sequence, movement classification, and the
    contrastive term through the shared backbone.
    """
    cfg = micro_config()
    rng = np.random.default_rng(seed)
    model = InteractionModel(cfg, rng, dtype=dtype)
    data_rng = np.random.default_rng(seed + 1)
    frames = data_rng.uniform(0, 1, (2, cfg.k, 3, 8, 8))
    gaze_target = data_rng.uniform(0.2, 0.8, (2, cfg.k, 2))
    gaze_valid = np.array([[True, False], [True, True]])
    move_labels = (data_rng.uniform(size=(2, cfg.k, 6)) < 0.5).astype(np.float64)
    move_mask = data_rng.uniform(size=(2, cfg.k, 6)) < 0.8
    view = data_rng.uniform(0, 1, (2, 3, 8, 8))
    pos = data_rng.standard_normal((2, cfg.contrastive_dim))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    bank = data_rng.standard_normal((6, cfg.contrastive_dim))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    weights = O.LossWeights()

    def build_loss():
        g_pred, m_logits = model.predict_sequence(Tensor(frames))
        att = O.gaze_loss(g_pred, gaze_target, gaze_valid, delta=weights.huber_delta)
        mov = O.movement_loss(m_logits, O.MovementTarget(move_labels, move_mask))
        _, z = model.encode_frame(Tensor(view))
        vis = O.infonce_loss(z, pos, bank, tau=cfg.tau)
        return O.total_loss(att, mov, vis, weights)

    return build_loss, list(model.named_params()), model


def fd_check_params(build_loss, named_params, eps=1e-4):
    """Finite-difference check of d(loss)/d(param) for every named parameter.

    ``build_loss`` must rebuild the loss from current parameter values on
    each call (deterministically).  Returns {path: max relative error}.
    Parameters should be float64 for the comparison to be meaningful.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    errors = {}
    for path, p in named_params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = build_loss().item()
            flat[i] = saved - eps
            f_minus = build_loss().item()
            flat[i] = saved
            numeric[i] = (f_plus - f_minus) / (2 * eps)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = np.abs(analytic - numeric) / denom
        errors[path] = float(err.max()) if err.size else 0.0
    return errors
