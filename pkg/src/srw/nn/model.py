"""Two-chain cross-convolution network and a plain single-chain CNN.

A descriptor is a plain dict (JSON-serializable) so it can be embedded in
checkpoints and config files unchanged::

    {
      "input_shape": [H, W, C],
      "chains": [{"name": "macro", "channels": [0, 1],
                  "blocks": [{"in": 2, "out": 8, "kernel": 5, "stride": 1}, ...]},
                 ...],
      "cross": [{"in": 16, "out": 8, "kernel": 2, "stride": 1}, ...],
      "embedding": {"in": 8, "out": 32},
      "logits": {"in": 32, "out": 3}
    }

Every chain block is conv + batch-norm + ReLU + 2x2 max-pool. When ``cross``
is non-empty there is one cross stage per block: it convolves the
concatenation of all chain outputs at that depth (plus the pooled previous
cross output) and the last cross stage feeds the global-average-pool head.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from srw.nn import ops


class ShapeError(ValueError):
    """Descriptor or input shapes do not line up."""


class StaleTraceError(RuntimeError):
    """A trace was used after the model it came from was updated."""


def radar_descriptor(n_classes=3, input_hw=(32, 32), widths=(8, 16, 32),
                     cross_widths=None, embedding_dim=32, kernel=5, cross_kernel=2):
    """Macro/Micro dual-chain descriptor for 4-channel range-Doppler input."""
    cross_widths = tuple(cross_widths or widths)
    chains = []
    for name, chans in (("macro", [0, 1]), ("micro", [2, 3])):
        blocks, c_in = [], len(chans)
        for width in widths:
            blocks.append({"in": c_in, "out": width, "kernel": kernel, "stride": 1})
            c_in = width
        chains.append({"name": name, "channels": chans, "blocks": blocks})
    cross, prev = [], 0
    for width, cw in zip(widths, cross_widths):
        cross.append({"in": 2 * width + prev, "out": cw, "kernel": cross_kernel, "stride": 1})
        prev = cw
    return {
        "input_shape": [int(input_hw[0]), int(input_hw[1]), 4],
        "chains": chains,
        "cross": cross,
        "embedding": {"in": cross_widths[-1], "out": embedding_dim},
        "logits": {"in": embedding_dim, "out": n_classes},
    }


def image_descriptor(n_classes=10, input_shape=(32, 32, 3), widths=(16, 32, 64),
                     embedding_dim=32, kernel=3):
    """Small single-chain CNN for image-file datasets."""
    blocks, c_in = [], input_shape[2]
    for width in widths:
        blocks.append({"in": c_in, "out": width, "kernel": kernel, "stride": 1})
        c_in = width
    return {
        "input_shape": list(input_shape),
        "chains": [{"name": "image", "channels": list(range(input_shape[2])), "blocks": blocks}],
        "cross": [],
        "embedding": {"in": widths[-1], "out": embedding_dim},
        "logits": {"in": embedding_dim, "out": n_classes},
    }


def validate_descriptor(desc):
    """Check layer-to-layer channel consistency; return output shapes by layer.

    Raises ShapeError naming the first offending layer.
    """
    h, w, c = desc["input_shape"]
    chains = desc["chains"]
    if not chains:
        raise ShapeError("descriptor has no chains")
    n_blocks = len(chains[0]["blocks"])
    shapes = {}
    for chain in chains:
        if len(chain["blocks"]) != n_blocks:
            raise ShapeError(f"chain '{chain['name']}' has {len(chain['blocks'])} blocks, expected {n_blocks}")
        for ch in chain["channels"]:
            if not 0 <= ch < c:
                raise ShapeError(f"chain '{chain['name']}' selects channel {ch} of a {c}-channel input")
        c_prev, hh, ww = len(chain["channels"]), h, w
        for k, blk in enumerate(chain["blocks"], 1):
            name = f"{chain['name']}.block{k}"
            if blk.get("stride", 1) != 1:
                raise ShapeError(f"{name}: only stride-1 convolutions are supported")
            if blk["in"] != c_prev:
                raise ShapeError(f"{name}: expects {blk['in']} input channels, previous layer gives {c_prev}")
            if hh % 2 or ww % 2:
                raise ShapeError(f"{name}: cannot 2x2-pool a {hh}x{ww} map")
            hh, ww, c_prev = hh // 2, ww // 2, blk["out"]
            shapes[name] = (hh, ww, c_prev)
    cross = desc.get("cross") or []
    if cross and len(cross) != n_blocks:
        raise ShapeError(f"cross has {len(cross)} stages, expected {n_blocks}")
    prev = 0
    for k, stage in enumerate(cross, 1):
        name = f"cross{k}"
        expect = sum(ch["blocks"][k - 1]["out"] for ch in chains) + prev
        if stage["in"] != expect:
            raise ShapeError(f"{name}: expects {stage['in']} input channels, previous layers give {expect}")
        prev = stage["out"]
        hh, ww, _ = shapes[f"{chains[0]['name']}.block{k}"]
        shapes[name] = (hh, ww, prev)
    if cross:
        feat = cross[-1]["out"]
    else:
        if len(chains) != 1:
            raise ShapeError("multiple chains need cross stages to merge them")
        feat = chains[0]["blocks"][-1]["out"]
    if desc["embedding"]["in"] != feat:
        raise ShapeError(f"embedding: expects {desc['embedding']['in']} inputs, features give {feat}")
    shapes["embedding"] = (desc["embedding"]["out"],)
    if desc["logits"]["in"] != desc["embedding"]["out"]:
        raise ShapeError(f"logits: expects {desc['logits']['in']} inputs, embedding gives {desc['embedding']['out']}")
    shapes["logits"] = (desc["logits"]["out"],)
    return shapes


@dataclass
class ModelState:
    descriptor: dict
    params: dict
    buffers: dict
    seed: int
    train: bool = True
    version: int = 0
    meta: dict = field(default_factory=dict)
    # bumped on every parameter update; traces remember the value they saw
    _token: object = field(default_factory=object, repr=False, compare=False)

    @property
    def n_classes(self):
        return self.descriptor["logits"]["out"]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def eval(self):
        return replace(self, train=False)

    def training(self):
        return replace(self, train=True)

    def astype(self, dtype):
        return replace(
            self,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
            _token=object(),
        )

    def copy(self):
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def n_parameters(self):
        return sum(v.size for v in self.params.values())


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(descriptor, seed, dtype=np.float32):
    """Initialize parameters for ``descriptor`` (He-uniform, BN gamma=1 beta=0)."""
    validate_descriptor(descriptor)
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def conv(name, spec, bias=True):
        k = spec["kernel"]
        params[f"{name}.w"] = _he_uniform(rng, (k, k, spec["in"], spec["out"]), k * k * spec["in"], dtype)
        if bias:
            params[f"{name}.b"] = np.zeros(spec["out"], dtype)

    for chain in descriptor["chains"]:
        for k, blk in enumerate(chain["blocks"], 1):
            name = f"{chain['name']}.block{k}"
            # batch-norm follows, so a conv bias would be redundant
            conv(f"{name}.conv", blk, bias=False)
            params[f"{name}.bn.gamma"] = np.ones(blk["out"], dtype)
            params[f"{name}.bn.beta"] = np.zeros(blk["out"], dtype)
            buffers[f"{name}.bn.running_mean"] = np.zeros(blk["out"], dtype)
            buffers[f"{name}.bn.running_var"] = np.ones(blk["out"], dtype)
    for k, stage in enumerate(descriptor.get("cross") or [], 1):
        conv(f"cross{k}.conv", stage)
    for name in ("embedding", "logits"):
        spec = descriptor[name]
        params[f"{name}.w"] = _he_uniform(rng, (spec["in"], spec["out"]), spec["in"], dtype)
        params[f"{name}.b"] = np.zeros(spec["out"], dtype)
    return ModelState(descriptor=descriptor, params=params, buffers=buffers, seed=int(seed))


@dataclass
class Trace:
    token: object
    version: int
    caches: dict
    new_buffers: dict
    need_input_grad: bool = False


def forward(model, batch, need_input_grad=False):
    """Run the network on an (N, H, W, C) batch.

    Returns ``(embeddings, logits, trace)``. In train mode batch-norm uses the
    statistics of the whole batch; the updated running statistics are kept in
    the trace and committed by the optimizer step.
    """
    desc, p = model.descriptor, model.params
    if batch.ndim != 4 or list(batch.shape[1:]) != list(desc["input_shape"]):
        raise ShapeError(f"expected batch (N, {', '.join(map(str, desc['input_shape']))}), got {batch.shape}")
    batch = batch.astype(model.dtype, copy=False)
    caches, new_buffers = {}, {}
    train = model.train
    chain_outs = []
    for chain in desc["chains"]:
        h = batch[..., chain["channels"]]
        outs = []
        for k in range(1, len(chain["blocks"]) + 1):
            name = f"{chain['name']}.block{k}"
            h, caches[f"{name}.conv"] = ops.conv2d_forward(h, p[f"{name}.conv.w"])
            h, bn_cache = ops.batchnorm_forward(
                h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                model.buffers[f"{name}.bn.running_mean"], model.buffers[f"{name}.bn.running_var"], train)
            caches[f"{name}.bn"] = bn_cache
            new_buffers[f"{name}.bn.running_mean"] = bn_cache[4]
            new_buffers[f"{name}.bn.running_var"] = bn_cache[5]
            h, caches[f"{name}.relu"] = ops.relu_forward(h)
            h, caches[f"{name}.pool"] = ops.maxpool2_forward(h)
            outs.append(h)
        chain_outs.append(outs)

    cross = desc.get("cross") or []
    if cross:
        prev = None
        for k in range(1, len(cross) + 1):
            parts = [outs[k - 1] for outs in chain_outs]
            if prev is not None:
                prev, caches[f"cross{k}.inpool"] = ops.maxpool2_forward(prev)
                parts.append(prev)
            caches[f"cross{k}.split"] = [q.shape[-1] for q in parts]
            h = np.concatenate(parts, axis=-1)
            h, caches[f"cross{k}.conv"] = ops.conv2d_forward(h, p[f"cross{k}.conv.w"], p[f"cross{k}.conv.b"])
            prev, caches[f"cross{k}.relu"] = ops.relu_forward(h)
        feat = prev
    else:
        feat = chain_outs[0][-1]

    g, caches["gap"] = ops.gap_forward(feat)
    emb, caches["embedding"] = ops.dense_forward(g, p["embedding.w"], p["embedding.b"])
    logits, caches["logits"] = ops.dense_forward(emb, p["logits.w"], p["logits.b"])
    trace = Trace(token=model._token, version=model.version, caches=caches,
                  new_buffers=new_buffers if train else {}, need_input_grad=need_input_grad)
    return emb, logits, trace


def backward(model, trace, d_embeddings, d_logits):
    """Gradients of a scalar loss w.r.t. every parameter (and the input).

    ``d_embeddings`` / ``d_logits`` are the loss gradients w.r.t. the two
    outputs of :func:`forward`; either may be None.
    """
    if trace.token is not model._token or trace.version != model.version:
        raise StaleTraceError("trace was produced by a different model version")
    desc, c = model.descriptor, trace.caches
    grads = {}
    d_emb = np.zeros_like(c["logits"][0]) if d_embeddings is None else d_embeddings
    if d_logits is not None:
        dx, grads["logits.w"], grads["logits.b"] = ops.dense_backward(d_logits, c["logits"])
        d_emb = d_emb + dx
    dg, grads["embedding.w"], grads["embedding.b"] = ops.dense_backward(d_emb, c["embedding"])
    dfeat = ops.gap_backward(dg, c["gap"])

    chains = desc["chains"]
    n_blocks = len(chains[0]["blocks"])
    d_chain = {ch["name"]: [None] * n_blocks for ch in chains}
    cross = desc.get("cross") or []
    if cross:
        dprev = dfeat
        for k in range(len(cross), 0, -1):
            dh = ops.relu_backward(dprev, c[f"cross{k}.relu"])
            dh, grads[f"cross{k}.conv.w"], grads[f"cross{k}.conv.b"] = ops.conv2d_backward(dh, c[f"cross{k}.conv"])
            pieces = np.split(dh, np.cumsum(c[f"cross{k}.split"])[:-1], axis=-1)
            for ch, piece in zip(chains, pieces):
                d_chain[ch["name"]][k - 1] = piece
            if k > 1:
                dprev = ops.maxpool2_backward(pieces[-1], c[f"cross{k}.inpool"])
    else:
        d_chain[chains[0]["name"]][-1] = dfeat

    d_input = None
    if trace.need_input_grad:
        in_shape = c[f"{chains[0]['name']}.block1.conv"][1][:3] + (desc["input_shape"][2],)
        d_input = np.zeros(in_shape, dtype=dfeat.dtype)
    for ch in chains:
        name0 = ch["name"]
        dh = None
        for k in range(n_blocks, 0, -1):
            name = f"{name0}.block{k}"
            inject = d_chain[name0][k - 1]
            if inject is not None:
                dh = inject if dh is None else dh + inject
            dh = ops.maxpool2_backward(dh, c[f"{name}.pool"])
            dh = ops.relu_backward(dh, c[f"{name}.relu"])
            dh, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = ops.batchnorm_backward(dh, c[f"{name}.bn"])
            need_dx = k > 1 or trace.need_input_grad
            dh, grads[f"{name}.conv.w"], _ = ops.conv2d_backward(dh, c[f"{name}.conv"], need_dx=need_dx)
        if d_input is not None:
            d_input[..., ch["channels"]] += dh
    grads = {k: grads[k] for k in model.params}
    return grads, d_input


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, model, grads, new_buffers=None):
        """Return a new ModelState with every parameter moved one Adam step."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        params = {}
        for name, value in model.params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[name] + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            params[name] = (value - update).astype(value.dtype, copy=False)
        buffers = dict(model.buffers)
        if new_buffers:
            buffers.update(new_buffers)
        return replace(model, params=params, buffers=buffers, version=model.version + 1)


def backward_and_step(model, trace, loss_gradient, optimizer):
    """One training step: backprop ``(d_embeddings, d_logits)`` and apply Adam."""
    d_emb, d_logits = loss_gradient
    grads, _ = backward(model, trace, d_emb, d_logits)
    return optimizer.step(model, grads, trace.new_buffers)


def predict(model, batch, batch_size=256):
    """Infer-mode labels (argmax, lowest index on ties) and class probabilities."""
    model = model if not model.train else model.eval()
    probs = []
    for start in range(0, len(batch), batch_size):
        _, logits, _ = forward(model, batch[start:start + batch_size])
        probs.append(ops.softmax(logits))
    if probs:
        probs = np.concatenate(probs)
    else:
        probs = np.zeros((0, model.n_classes), dtype=model.dtype)
    return probs.argmax(axis=1), probs
