"""Patch-pair sample generation, smoothed 201-way labels, softmax
cross-entropy, backpropagation through the Siamese branches, and the
minibatch SGD trainer.
"""

from dataclasses import dataclass

import numpy as np

from .network import (
    backward_blocks,
    forward_blocks,
    parameters,
    similarity_scores,
    update_running_stats,
)

# One left patch is scored against 201 right sub-windows (the true position
# plus 100 candidates on each side), so a right strip is 200 columns wider
# than the patch.
LABEL_SIZE = 201
LABEL_CENTER = 100
STRIP_EXTRA = LABEL_SIZE - 1

LOG_EPS = 1e-12


@dataclass
class TrainingSample:
    left_patch: np.ndarray  # (H, W, 1)
    right_strip: np.ndarray  # (H, W + 200, 1)
    label: np.ndarray  # (201,)


@dataclass
class TrainerConfig:
    batch_size: int = 128
    iterations: int = 40000
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_at: float = 0.75  # fraction of iterations after which the rate decays
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iteration count must be >= 1")


def make_label():
    """Smoothed ground-truth vector: 0.5 at the true position, 0.2 one step
    away, 0.05 two steps away, 0 elsewhere."""
    label = np.zeros(LABEL_SIZE)
    label[LABEL_CENTER] = 0.5
    label[LABEL_CENTER - 1] = label[LABEL_CENTER + 1] = 0.2
    label[LABEL_CENTER - 2] = label[LABEL_CENTER + 2] = 0.05
    return label


def softmax(r):
    """Stable softmax along the last axis."""
    r = np.asarray(r, dtype=np.float64)
    shifted = r - r.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p_o, p_gt):
    """-sum(p_gt * log p_o), with the log clamped away from zero."""
    p_o = np.asarray(p_o, dtype=np.float64)
    p_gt = np.asarray(p_gt, dtype=np.float64)
    return float(-(p_gt * np.log(np.maximum(p_o, LOG_EPS))).sum())


def generate_patch_pairs(left, right, gt, patch_size):
    """Yield TrainingSamples for every usable ground-truth pixel.

    A pixel is usable when its disparity is valid and both the patch window
    around it and the strip window around the matching right position lie
    fully inside the images. Invalid and out-of-bounds pixels are skipped.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError("left and right images must have the same size")
    if patch_size % 2 != 1:
        raise ValueError("patch size must be odd")
    h = patch_size // 2
    rows, cols = left.shape
    reach = LABEL_CENTER + h
    label = make_label()
    for y in range(h, rows - h):
        for x in range(h, cols - h):
            if not gt.valid[y, x]:
                continue
            q = x - int(round(gt.values[y, x]))
            if q - reach < 0 or q + reach >= cols:
                continue
            yield TrainingSample(
                left_patch=left[y - h:y + h + 1, x - h:x + h + 1, None].copy(),
                right_strip=right[y - h:y + h + 1, q - reach:q + reach + 1, None].copy(),
                label=label.copy(),
            )


def _stack_batch(samples):
    lefts = np.stack([s.left_patch for s in samples])
    rights = np.stack([s.right_strip for s in samples])
    labels = np.stack([s.label for s in samples])
    return lefts, rights, labels


def batch_loss_and_gradients(extractor, lefts, rights, labels, training=True):
    """Mean cross-entropy over a batch plus gradients for every parameter.

    Returns (loss, probabilities, gradients, caches); the caches carry the
    batch statistics needed to update BN running estimates. With
    training=False (inference-mode BN) only the loss and probabilities are
    computed and gradients come back as None.
    """
    n_positions = rights.shape[2] - lefts.shape[2] + 1
    out_l, caches_l = forward_blocks(extractor, lefts, training=training)
    out_r, caches_r = forward_blocks(extractor, rights, training=training)
    if out_l.shape[1] != 1 or out_l.shape[2] != 1:
        raise ValueError(
            f"network reduces a {lefts.shape[1]}x{lefts.shape[2]} patch to "
            f"{out_l.shape[1]}x{out_l.shape[2]}, not 1x1"
        )
    b, c = out_l.shape[0], out_l.shape[-1]
    o_left = out_l.reshape(b, c)
    o_right = out_r.reshape(b, n_positions, c)

    scores = np.einsum("bc,bnc->bn", o_left, o_right)
    probs = softmax(scores)
    loss = float(-(labels * np.log(np.maximum(probs, LOG_EPS))).sum(axis=1).mean())
    if not training:
        return loss, probs, None, (caches_l, caches_r)

    g_scores = (probs - labels) / b
    g_left = np.einsum("bn,bnc->bc", g_scores, o_right).reshape(out_l.shape)
    g_right = (g_scores[:, :, None] * o_left[:, None, :]).reshape(out_r.shape)

    grads_l = backward_blocks(extractor, caches_l, g_left)
    grads_r = backward_blocks(extractor, caches_r, g_right)
    grads = [gl + gr for gl, gr in zip(grads_l, grads_r)]
    return loss, probs, grads, (caches_l, caches_r)


def backward(sample, extractor):
    """Gradient of the single-sample loss with respect to every parameter."""
    lefts, rights, labels = _stack_batch([sample])
    _, _, grads, _ = batch_loss_and_gradients(extractor, lefts, rights, labels)
    return grads


def sample_loss(extractor, sample, training=True):
    """Forward-only loss of one sample (used by gradient checking)."""
    lefts, rights, labels = _stack_batch([sample])
    loss, _, _, _ = batch_loss_and_gradients(extractor, lefts, rights, labels,
                                             training=training)
    return loss


def predict_scores(extractor, left_patch, right_strip):
    """Inference-mode match scores of one left patch against every strip
    sub-window; the trained scorer's test-time path."""
    out_l, _ = forward_blocks(extractor, np.asarray(left_patch)[None], training=False)
    out_r, _ = forward_blocks(extractor, np.asarray(right_strip)[None], training=False)
    return similarity_scores(out_l[0], out_r[0])


def train(dataset, extractor, config, checkpoint_every=0, on_checkpoint=None):
    """Minibatch SGD with momentum; deterministic under a fixed seed.

    Returns (extractor, trace) where trace is a list of (iteration, loss).
    Mutates the extractor's parameters in place. When checkpoint_every > 0,
    on_checkpoint(iteration, extractor) runs every that many iterations.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = parameters(extractor)
    velocity = [np.zeros_like(p) for p in params]
    decay_iteration = int(config.iterations * config.decay_at)
    trace = []
    for iteration in range(config.iterations):
        lr = config.learning_rate
        if iteration >= decay_iteration:
            lr *= config.decay_factor
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        lefts, rights, labels = _stack_batch([dataset[i] for i in idx])
        loss, _, grads, (caches_l, caches_r) = batch_loss_and_gradients(
            extractor, lefts, rights, labels
        )
        for p, v, g in zip(params, velocity, grads):
            v *= config.momentum
            v += g
            p -= lr * v
        update_running_stats(extractor, caches_l)
        update_running_stats(extractor, caches_r)
        trace.append((iteration, loss))
        done = iteration + 1
        if checkpoint_every and on_checkpoint and done % checkpoint_every == 0:
            on_checkpoint(done, extractor)
    return extractor, trace


def read_manifest(path):
    """Parse a dataset manifest: one 'left right gt' path triple per line."""
    triples = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"manifest line {line_no}: expected 3 paths, got {len(parts)}")
            triples.append(tuple(parts))
    return triples


def write_loss_csv(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for iteration, loss in trace:
            fh.write(f"{iteration},{loss:.10g}\n")
