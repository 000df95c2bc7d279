"""Momentum-SGD training of the embedding network on sampled triplets.

Single-worker `train` is bit-for-bit deterministic given (seed, data, config).
`train_async` runs several workers against one shared parameter store:
reads take per-array snapshots, commits apply per-array atomic updates, and
gradients may be computed on stale snapshots (convergence, not determinism,
is the contract). The momentum scheme is Nesterov-style: gradients are
evaluated at the lookahead point params + mu * velocity.
"""

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from tripletrank.net import Conv, FullyConnected, _build_layer, downsample
from tripletrank.rankloss import LossConfig, batch_loss_grad
from tripletrank.sampler import BufferSet, SamplerConfig

_STARVATION_LIMIT = 10_000  # consecutive discarded draws before aborting


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    workers: int = 1
    triplet_budget: int = 200_000
    seed: int = 0
    max_shift: int = 2
    uniform_sampling: bool = False
    log_interval: int = 200
    probe_size: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be finite and positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.workers < 1 or self.triplet_budget < 1:
            raise ValueError("batch_size, workers and triplet_budget must be >= 1")
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        self.loss.validate()
        self.sampler.validate()


@dataclass
class TrainResult:
    net: object
    log: list
    steps: int
    triplets_used: int
    skipped_steps: int
    wall_s: float
    sampler_stats: dict


def momentum_step(params, velocity, gradients, learning_rate, momentum):
    """velocity <- mu*velocity - lr*grad; params <- params + velocity (in place).

    The caller evaluates `gradients` at the lookahead point
    params + momentum * velocity to realize the Nesterov scheme. Returns
    False (and leaves both arrays untouched) when the gradient is non-finite.
    """
    if params.shape != velocity.shape or params.shape != gradients.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, velocity {velocity.shape}, "
            f"gradients {gradients.shape}"
        )
    if not np.isfinite(gradients).all():
        return False
    velocity *= momentum
    velocity -= learning_rate * gradients
    params += velocity
    return True


def random_pixel_shift(tensor, max_shift, rng):
    """Translate by (dx, dy) ~ uniform on [-s, s]^2, zero-filling vacated pixels."""
    s = int(max_shift)
    if s == 0:
        return tensor
    h, w = tensor.shape[-2:]
    if s >= h or s >= w:
        raise ValueError(f"max shift {s} must be smaller than spatial extent {(h, w)}")
    dy, dx = rng.integers(-s, s + 1, size=2)
    out = np.zeros_like(tensor)
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = tensor[..., src_y, src_x]
    return out


def _draw_batch(buffers, relevance, rng, batch_size, uniform):
    """Draw until the batch fills; aborts when the sampler starves."""
    draw = buffers.uniform_sample_triplet if uniform else buffers.sample_triplet
    batch = []
    misses = 0
    while len(batch) < batch_size:
        triplet = draw(relevance, rng)
        if triplet is None:
            misses += 1
            if misses >= _STARVATION_LIMIT:
                raise RuntimeError(
                    f"sampler starvation: {misses} consecutive discarded draws; "
                    "buffers cannot form the requested triplets"
                )
            continue
        misses = 0
        batch.append(triplet)
    return batch


def _batch_tensors(dataset, batch, max_shift, rng):
    """Stack (3B, C, H, W) input: queries, then positives, then negatives."""
    images = []
    for role in ("query_id", "positive_id", "negative_id"):
        for t in batch:
            img = dataset.tensor(getattr(t, role))
            if max_shift > 0:
                img = random_pixel_shift(img, max_shift, rng)
            images.append(img)
    return np.stack(images)


def _triplet_gradient(net, dataset, batch, params, config, rng_net, rng_aug):
    """Mean hinge gradient plus weight decay, all evaluated at `params`."""
    b = len(batch)
    x = _batch_tensors(dataset, batch, config.max_shift, rng_aug)
    emb, cache = net.forward(x, mode="train", rng=rng_net, params=params)
    hinge, grad_emb = batch_loss_grad(emb.reshape(3, b, -1), config.loss.gap)
    grads = net.backward(cache, grad_emb.reshape(3 * b, -1))
    grads /= b
    if config.loss.weight_decay > 0.0:
        grads += (2.0 * config.loss.weight_decay) * params
    loss = float(hinge.mean()) + config.loss.weight_decay * float(
        np.dot(params.astype(np.float64), params.astype(np.float64))
    )
    active = float((hinge > 0.0).mean())
    return grads, loss, active


def _probe_loss(net, dataset, probe, gap):
    """Inference-mode mean hinge on a frozen triplet batch."""
    if not probe:
        return None
    x = _batch_tensors(dataset, probe, 0, None)
    emb = net.embed(x)
    hinge, _ = batch_loss_grad(emb.reshape(3, len(probe), -1), gap)
    return float(hinge.mean())


def _populate(dataset, relevance, config, rng):
    buffers = BufferSet(config.sampler)
    buffers.insert_dataset(dataset, relevance, rng)
    return buffers


def train(dataset, relevance, net, config, checkpoint_cb=None):
    """Deterministic single-worker training; returns a TrainResult.

    `checkpoint_cb(steps, params)`, when given, fires at every log interval.
    """
    config.validate()
    seq = np.random.SeedSequence(config.seed)
    rng_buffer, rng_sampler, rng_net, rng_aug, rng_probe = (
        np.random.default_rng(s) for s in seq.spawn(5)
    )
    buffers = _populate(dataset, relevance, config, rng_buffer)
    probe = _draw_batch(
        buffers, relevance, rng_probe, min(config.probe_size, config.triplet_budget),
        config.uniform_sampling,
    )

    velocity = np.zeros_like(net.params)
    log = []
    steps = skipped = consumed = 0
    t0 = time.perf_counter()
    while consumed < config.triplet_budget:
        b = min(config.batch_size, config.triplet_budget - consumed)
        batch = _draw_batch(buffers, relevance, rng_sampler, b, config.uniform_sampling)
        lookahead = net.params + config.momentum * velocity
        grads, loss, active = _triplet_gradient(
            net, dataset, batch, lookahead, config, rng_net, rng_aug
        )
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"training diverged: non-finite loss at step {steps} "
                f"(triplets consumed: {consumed})"
            )
        if momentum_step(net.params, velocity, grads, config.learning_rate, config.momentum):
            steps += 1
        else:
            skipped += 1
        consumed += len(batch)
        if steps % config.log_interval == 0 or consumed >= config.triplet_budget:
            log.append({
                "step": steps,
                "triplets": consumed,
                "loss": loss,
                "active_fraction": active,
                "probe_loss": _probe_loss(net, dataset, probe, config.loss.gap),
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
                "sampler": buffers.stats_report(),
            })
            if checkpoint_cb is not None:
                checkpoint_cb(steps, net.params)
    return TrainResult(
        net, log, steps, consumed, skipped, time.perf_counter() - t0, buffers.stats_report()
    )


class SharedParamStore:
    """Flat parameter + velocity storage with per-array atomic commits.

    A snapshot copies each parameter array under its own lock, so it sees
    every commit that completed before the snapshot began; arrays may mix
    versions across a snapshot, matching the asynchronous consistency level.
    """

    def __init__(self, net):
        self.params = net.params
        self.velocity = np.zeros_like(net.params)
        self._spans = []
        for _, _, offset, shape in net._layout:
            self._spans.append((offset, offset + int(np.prod(shape))))
        self._locks = [threading.Lock() for _ in self._spans]
        self.commits = 0
        self._commit_lock = threading.Lock()

    def snapshot(self):
        p = np.empty_like(self.params)
        v = np.empty_like(self.velocity)
        for (a, b), lock in zip(self._spans, self._locks):
            with lock:
                p[a:b] = self.params[a:b]
                v[a:b] = self.velocity[a:b]
        return p, v

    def commit(self, grads, learning_rate, momentum):
        for (a, b), lock in zip(self._spans, self._locks):
            with lock:
                self.velocity[a:b] *= momentum
                self.velocity[a:b] -= learning_rate * grads[a:b]
                self.params[a:b] += self.velocity[a:b]
        with self._commit_lock:
            self.commits += 1


def train_async(dataset, relevance, net, config, checkpoint_cb=None):
    """Asynchronous multi-worker training against one shared parameter store.

    The sampler runs on a dedicated feeder thread with a bounded queue
    (backpressure blocks the feeder; triplets are never dropped). No
    determinism is guaranteed for more than one worker. `checkpoint_cb`
    fires every few seconds from the coordinating thread with a consistent
    parameter snapshot.
    """
    config.validate()
    seq = np.random.SeedSequence(config.seed)
    rng_buffer, rng_sampler = (np.random.default_rng(s) for s in seq.spawn(2))
    worker_seqs = seq.spawn(config.workers)
    buffers = _populate(dataset, relevance, config, rng_buffer)

    store = SharedParamStore(net)
    batches = queue.Queue(maxsize=4 * config.workers)
    log = []
    log_lock = threading.Lock()
    worker_steps = [0] * config.workers
    errors = []

    def feeder():
        consumed = 0
        try:
            while consumed < config.triplet_budget:
                b = min(config.batch_size, config.triplet_budget - consumed)
                batches.put(_draw_batch(
                    buffers, relevance, rng_sampler, b, config.uniform_sampling
                ))
                consumed += b
        except Exception as exc:  # starvation propagates to the caller
            errors.append(exc)
        finally:
            for _ in range(config.workers):
                batches.put(None)

    def worker(widx):
        wseq = worker_seqs[widx].spawn(2)
        rng_net = np.random.default_rng(wseq[0])
        rng_aug = np.random.default_rng(wseq[1])
        try:
            while True:
                batch = batches.get()
                if batch is None:
                    break
                params, velocity = store.snapshot()
                lookahead = params + config.momentum * velocity
                grads, loss, active = _triplet_gradient(
                    net, dataset, batch, lookahead, config, rng_net, rng_aug
                )
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"worker {widx}: training diverged (non-finite loss)"
                    )
                if np.isfinite(grads).all():
                    store.commit(grads, config.learning_rate, config.momentum)
                    worker_steps[widx] += 1
                    if worker_steps[widx] % config.log_interval == 0:
                        with log_lock:
                            log.append({
                                "worker": widx,
                                "step": worker_steps[widx],
                                "loss": loss,
                                "active_fraction": active,
                            })
        except Exception as exc:
            errors.append(exc)
            while batches.get() is not None:  # drain so the feeder can finish
                pass

    t0 = time.perf_counter()
    feed = threading.Thread(target=feeder, name="triplet-feeder")
    threads = [
        threading.Thread(target=worker, args=(w,), name=f"trainer-worker-{w}")
        for w in range(config.workers)
    ]
    feed.start()
    for t in threads:
        t.start()
    last_ckpt = time.perf_counter()
    while any(t.is_alive() for t in threads):
        time.sleep(0.05)
        if checkpoint_cb is not None and time.perf_counter() - last_ckpt > 2.0:
            params, _ = store.snapshot()
            checkpoint_cb(sum(worker_steps), params)
            last_ckpt = time.perf_counter()
    feed.join()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]

    wall = time.perf_counter() - t0
    assert store.commits == sum(worker_steps)
    result = TrainResult(
        net, log, store.commits, config.triplet_budget, 0, wall, buffers.stats_report()
    )
    result.worker_steps = list(worker_steps)
    return result


class PathClassifier:
    """A single network path topped with a temporary softmax head."""

    def __init__(self, path_spec, input_shape, num_classes, rng, dtype=np.float32):
        c, h, w = input_shape
        if h % path_spec.factor or w % path_spec.factor:
            raise ValueError(f"factor {path_spec.factor} does not divide {(h, w)}")
        self.factor = path_spec.factor
        self.layers = [_build_layer(kind, kwargs) for kind, kwargs in path_spec.layers]
        self.head = FullyConnected(num_classes, activation="none")
        shape = (c, h // path_spec.factor, w // path_spec.factor)
        self._layout = []
        offset = 0
        for layer in self.layers + [self.head]:
            shape = layer.trace(shape)
            for pshape in layer.param_shapes():
                self._layout.append((offset, pshape))
                offset += int(np.prod(pshape))
        self.path_param_count = offset - sum(
            int(np.prod(s)) for s in self.head.param_shapes()
        )
        self.params = np.zeros(offset, dtype=dtype)
        idx = 0
        for layer in self.layers + [self.head]:
            views = []
            for _ in layer.param_shapes():
                off, pshape = self._layout[idx]
                views.append(self.params[off : off + int(np.prod(pshape))].reshape(pshape))
                idx += 1
            layer.init_params(views, rng)

    def _views(self, flat):
        out = []
        idx = 0
        for layer in self.layers + [self.head]:
            views = []
            for _ in layer.param_shapes():
                off, pshape = self._layout[idx]
                views.append(flat[off : off + int(np.prod(pshape))].reshape(pshape))
                idx += 1
            out.append(views)
        return out

    def forward(self, x, mode, rng):
        h = downsample(np.asarray(x, dtype=self.params.dtype), self.factor)
        caches = []
        for layer, views in zip(self.layers + [self.head], self._views(self.params)):
            h, cache = layer.forward(h, views, mode, rng)
            caches.append(cache)
        return h, caches

    def backward(self, g, caches):
        grads = np.zeros_like(self.params)
        all_views = self._views(self.params)
        grad_views = self._views(grads)
        for i in range(len(all_views) - 1, -1, -1):
            layer = (self.layers + [self.head])[i]
            g, layer_grads = layer.backward(g, caches[i], all_views[i])
            for view, arr in zip(grad_views[i], layer_grads):
                view[...] += arr
        return grads

    def predict(self, x):
        logits, _ = self.forward(x, "infer", None)
        return logits.argmax(axis=1)


@dataclass
class PretrainResult:
    classifier: PathClassifier
    path_params: np.ndarray  # flat, head excluded
    log: list
    final_accuracy: float


def pretrain_softmax(dataset, net, config, epochs=5, path="full", batch_size=32):
    """Train the named path as a softmax classifier on category labels.

    Returns the trained path parameters (head discarded) and copies them
    into the matching path of `net` as initialization for ranking training.
    """
    categories = dataset.categories
    if len(categories) < 2:
        raise ValueError("softmax pretraining needs at least two categories")
    cat_index = {c: k for k, c in enumerate(categories)}
    spec = next((p for p in net.config.paths if p.name == path), None)
    if spec is None:
        raise ValueError(f"net has no path named {path!r}")

    seq = np.random.SeedSequence(config.seed + 1)
    rng_init, rng_order, rng_net, rng_aug = (np.random.default_rng(s) for s in seq.spawn(4))
    clf = PathClassifier(spec, net.config.input_shape, len(categories), rng_init)
    velocity = np.zeros_like(clf.params)

    n = len(dataset)
    labels = np.array([cat_index[dataset.category(i)] for i in dataset.ids])
    log = []
    for epoch in range(epochs):
        order = rng_order.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            x = np.stack([
                random_pixel_shift(dataset.tensors[r], config.max_shift, rng_aug)
                if config.max_shift > 0 else dataset.tensors[r]
                for r in rows
            ])
            y = labels[rows]
            logits, caches = clf.forward(x, "train", rng_net)
            shifted = logits - logits.max(axis=1, keepdims=True)
            exp = np.exp(shifted.astype(np.float64))
            probs = exp / exp.sum(axis=1, keepdims=True)
            epoch_loss += float(-np.log(probs[np.arange(len(rows)), y] + 1e-300).sum())
            correct += int((logits.argmax(axis=1) == y).sum())
            g = probs.astype(clf.params.dtype)
            g[np.arange(len(rows)), y] -= 1.0
            g /= len(rows)
            grads = clf.backward(g, caches)
            momentum_step(clf.params, velocity, grads, config.learning_rate, config.momentum)
        log.append({
            "epoch": epoch,
            "cross_entropy": epoch_loss / n,
            "accuracy": correct / n,
        })

    preds = []
    for start in range(0, n, 256):
        preds.append(clf.predict(dataset.tensors[start : start + 256]))
    accuracy = float((np.concatenate(preds) == labels).mean())

    path_params = clf.params[: clf.path_param_count].copy()
    target = net.layer_params()
    source = clf._views(clf.params)
    for layer_idx in range(len(clf.layers)):
        for dst, src in zip(target[(path, layer_idx)], source[layer_idx]):
            dst[...] = src
    return PretrainResult(clf, path_params, log, accuracy)
