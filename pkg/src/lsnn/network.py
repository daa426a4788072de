"""Trainable layer classes: batched fast paths over the functional ops.

Internally these classes keep activations channels-last, (B, H, W, C):
patch matrices then reshape straight into feature maps with no transpose,
which matters on the hot path.  Patch vectors here are ordered (kh, kw,
channel); the functional single-image ops in `layers` keep the documented
channel-major order, and the two never mix.

First-layer classes (FirstConv, FirstLocal, FirstSmoothed) support G
independent groups sharing one input, for the multi-target task where
each group feeds the same downstream classifier.  Flow per batch:

    first.begin(x, train)
    for g in range(groups):
        out = first.group_forward(g)
        ...trunk forward / loss / trunk backward...
        first.group_backward(g, dout)
    first.end_backward()

Gradients accumulate into Param.grad until zero_grads(), which makes the
grouped backward and accumulation across loss heads automatic.
"""

import numpy as np

from . import smoother as sm


class Param:
    """Named trainable array with accumulated gradient."""

    __slots__ = ("name", "kind", "data", "grad", "lr_scale")

    def __init__(self, name, data, lr_scale=1.0, kind="tensor"):
        self.name = name
        self.kind = kind
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.lr_scale = lr_scale

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape}, lr_scale={self.lr_scale})"


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def im2col_cl(x, kh, kw):
    """(B, H, W, C) -> (B, m, kh*kw*C) patch matrix, positions row-major."""
    b, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    sb, sh, sw, sc = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, kh, kw, c), (sb, sh, sw, sh, sw, sc), writeable=False)
    return windows.reshape(b, oh * ow, kh * kw * c)


# ---------------------------------------------------------------------------
# Trunk layers


class Conv2D:
    """Valid convolution; kernels stored as a (kh*kw*C, F) matrix.

    Two equivalent engines, chosen by input depth: single-channel inputs
    unroll to a patch matrix and hit one GEMM; multi-channel inputs go
    through spectral products (one rfft2 per map, a per-frequency GEMM
    over channels, irfft2 back), which avoids materializing the much
    wider patch matrix.  The transform length equals the input extent, so
    circular products never wrap and both engines agree to roundoff.
    The input gradient (a full convolution of the upstream map with the
    kernel) is always spectral.
    """

    def __init__(self, in_channels, filters, kernel, rng, name, lr_scale=1.0):
        self.kh = self.kw = int(kernel)
        self.in_channels = in_channels
        self.filters = filters
        self.spectral = in_channels > 1
        k = in_channels * self.kh * self.kw
        self.W = Param(f"{name}.kernel", glorot(rng, (k, filters), k, filters),
                       lr_scale, kind="conv")
        self.b = Param(f"{name}.bias", np.zeros(filters), lr_scale, kind="conv")
        self._cache = None

    def forward(self, x, train=False, rng=None):
        b, h, w, c = x.shape
        oh, ow = h - self.kh + 1, w - self.kw + 1
        kernel = self.W.data.reshape(self.kh, self.kw, c, self.filters)
        kf = np.fft.rfft2(kernel, s=(h, w), axes=(0, 1))    # (h, wr, C, F)
        if self.spectral:
            xf = np.fft.rfft2(x, axes=(1, 2))               # (B, h, wr, C)
            prod = xf.transpose(1, 2, 0, 3) @ np.conj(kf)   # cross-correlation
            full = np.fft.irfft2(prod.transpose(2, 0, 1, 3), s=(h, w), axes=(1, 2))
            out = full[:, :oh, :ow, :] + self.b.data
            self._cache = (xf, x.shape, (oh, ow), kf)
        else:
            flat = im2col_cl(x, self.kh, self.kw).reshape(b * oh * ow, -1)
            out = (flat @ self.W.data + self.b.data).reshape(b, oh, ow, self.filters)
            self._cache = (flat, x.shape, (oh, ow), kf)
        return out.reshape(b, oh, ow, self.filters)

    def backward(self, dout, need_input_grad=True):
        stored, x_shape, (oh, ow), kf = self._cache
        b, h, w, c = x_shape
        df = None
        if self.spectral:
            xf = stored
            df = np.fft.rfft2(dout, s=(h, w), axes=(1, 2))  # (B, h, wr, F)
            prod = xf.transpose(1, 2, 3, 0) @ np.conj(df).transpose(1, 2, 0, 3)
            gk = np.fft.irfft2(prod, s=(h, w), axes=(0, 1))[:self.kh, :self.kw]
            self.W.grad += gk.reshape(-1, self.filters)
        else:
            flat_d = dout.reshape(b * oh * ow, self.filters)
            self.W.grad += stored.T @ flat_d
        self.b.grad += dout.sum(axis=(0, 1, 2))
        if not need_input_grad:
            return None
        if df is None:
            df = np.fft.rfft2(dout, s=(h, w), axes=(1, 2))
        prod = df.transpose(1, 2, 0, 3) @ kf.transpose(0, 1, 3, 2)  # full conv
        return np.fft.irfft2(prod.transpose(2, 0, 1, 3), s=(h, w), axes=(1, 2))

    def params(self):
        return [self.W, self.b]

    def pattern(self):
        return None


class MaxPool2:
    """2x2/stride-2 max pooling on (B, H, W, C); ties go to the first
    window element in row-major order."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        h, w = x.shape[1], x.shape[2]
        if h % 2 or w % 2:
            raise ValueError(f"pooling needs even extents, got {(h, w)}")
        quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2],
                 x[:, 1::2, 0::2], x[:, 1::2, 1::2])
        out = np.maximum(np.maximum(quads[0], quads[1]),
                         np.maximum(quads[2], quads[3]))
        self._cache = (quads, out, x.shape)
        return out

    def _winner_masks(self):
        quads, out, _ = self._cache
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for q in quads:
            m = (q == out) & ~taken
            taken |= m
            masks.append(m)
        return masks

    def backward(self, dout, need_input_grad=True):
        masks = self._winner_masks()
        dx = np.zeros(self._cache[2])
        dx[:, 0::2, 0::2] = dout * masks[0]
        dx[:, 0::2, 1::2] = dout * masks[1]
        dx[:, 1::2, 0::2] = dout * masks[2]
        dx[:, 1::2, 1::2] = dout * masks[3]
        return dx

    def params(self):
        return []

    def pattern(self):
        m = self._winner_masks()
        winner = m[1].astype(np.uint8) + 2 * m[2] + 3 * m[3]
        return winner.tobytes()


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout, need_input_grad=True):
        return dout * self._mask

    def params(self):
        return []

    def pattern(self):
        return np.packbits(self._mask.reshape(-1)).tobytes()


class Dropout:
    def __init__(self, rate):
        self.rate = rate
        self._keep = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._keep = None
            return x
        self._keep = rng.random(x.shape) >= self.rate
        return x * self._keep / (1.0 - self.rate)

    def backward(self, dout, need_input_grad=True):
        if self._keep is None:
            return dout
        return dout * self._keep / (1.0 - self.rate)

    def params(self):
        return []

    def pattern(self):
        return None


class Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, need_input_grad=True):
        return dout.reshape(self._shape)

    def params(self):
        return []

    def pattern(self):
        return None


class Dense:
    def __init__(self, n_in, n_out, rng, name, lr_scale=1.0,
                 zero_init=False, bias_init=None):
        w = np.zeros((n_in, n_out)) if zero_init else glorot(rng, (n_in, n_out), n_in, n_out)
        b = np.zeros(n_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
        self.W = Param(f"{name}.weight", w, lr_scale, kind="dense")
        self.b = Param(f"{name}.bias", b, lr_scale, kind="dense")
        self._x = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.W.data + self.b.data

    def backward(self, dout, need_input_grad=True):
        self.W.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        if not need_input_grad:
            return None
        return dout @ self.W.data.T

    def params(self):
        return [self.W, self.b]

    def pattern(self):
        return None


# ---------------------------------------------------------------------------
# Parameter network: image content -> Gaussian parameters


# per-smoother output layout; mu centered, identity precision factor
SMOOTHER_INIT = np.array([0.5, 0.5, 1.0, 1.0, 0.0])


class ParameterNet:
    """Two conv+pool stages and a linear regression head that emits
    (mu1, mu2, alpha, beta, gamma) per smoother.

    The head starts at zero weights with biases at SMOOTHER_INIT, so
    every smoother begins as a centered unit-precision Gaussian and the
    content pathway switches on gradually as the head learns.

    All parameters carry lr_scale (default 0.1): the smoother parameters
    are a small fraction of the model, and a full-rate head accumulates
    errors too fast to converge well.
    """

    def __init__(self, in_shape, n_smoothers, rng, name="pnet", lr_scale=0.1,
                 bias_init=None):
        c, h, w = in_shape
        self.n_smoothers = n_smoothers
        self.conv1 = Conv2D(c, 8, 5, rng, f"{name}.conv1", lr_scale)
        self.conv2 = Conv2D(8, 8, 6, rng, f"{name}.conv2", lr_scale)
        h1, w1 = (h - 4) // 2, (w - 4) // 2
        h2, w2 = (h1 - 5) // 2, (w1 - 5) // 2
        if (h - 4) % 2 or (w - 4) % 2 or (h1 - 5) % 2 or (w1 - 5) % 2:
            raise ValueError(f"input {h}x{w} does not pool evenly in the parameter net")
        flat = 8 * h2 * w2
        if bias_init is None:
            bias_init = np.tile(SMOOTHER_INIT, n_smoothers)
        self.head = Dense(flat, 5 * n_smoothers, rng, f"{name}.head", lr_scale,
                          zero_init=True, bias_init=bias_init)
        self._stack = [self.conv1, ReLU(), MaxPool2(), self.conv2, ReLU(),
                       MaxPool2(), Flatten(), self.head]

    def forward(self, x, train=False):
        h = x
        for layer in self._stack:
            h = layer.forward(h, train)
        return h  # (B, 5 * n_smoothers)

    def backward(self, dout):
        d = dout
        for i, layer in enumerate(reversed(self._stack)):
            d = layer.backward(d, need_input_grad=(i < len(self._stack) - 1))

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.head.params()

    def patterns(self):
        return [l.pattern() for l in self._stack]


def parameter_net_forward(net, x):
    """Run the parameter net on one image and slice the regression output
    into GaussianParams (mu, then the three precision-factor entries)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    out = net.forward(x[None], train=False)[0].reshape(net.n_smoothers, 5)
    return [sm.GaussianParams(row[:2], row[2:]) for row in out]


# ---------------------------------------------------------------------------
# First-layer variants (grouped)


class FirstConv:
    """Plain convolution first layer; one independent kernel set per group."""

    def __init__(self, in_shape, filters, kernel, rng, groups=1, name="layer1"):
        c, h, w = in_shape
        self.kh = self.kw = int(kernel)
        self.filters = filters
        self.groups = groups
        self.out_hw = (h - self.kh + 1, w - self.kw + 1)
        k = c * self.kh * self.kw
        self.W = Param(f"{name}.kernel", glorot(rng, (groups, k, filters), k, filters),
                       kind="conv")
        self.b = Param(f"{name}.bias", np.zeros((groups, filters)), kind="conv")
        self._flat = None

    def begin(self, x, train=False):
        self._b = x.shape[0]
        self._flat = im2col_cl(x, self.kh, self.kw).reshape(self._b * self.out_hw[0]
                                                            * self.out_hw[1], -1)

    def group_forward(self, g):
        out = self._flat @ self.W.data[g] + self.b.data[g]
        return out.reshape(self._b, *self.out_hw, self.filters)

    def group_backward(self, g, dout):
        flat_d = dout.reshape(-1, self.filters)
        self.W.grad[g] += self._flat.T @ flat_d
        self.b.grad[g] += flat_d.sum(axis=0)

    def end_backward(self):
        pass

    def params(self):
        return [self.W, self.b]

    def patterns(self):
        return []

    def weight_scalars_per_filter(self):
        return self.W.data[0].shape[0]


class FirstLocal:
    """Locally connected first layer: free per-position kernels per group."""

    def __init__(self, in_shape, filters, kernel, rng, groups=1, name="layer1"):
        c, h, w = in_shape
        self.kh = self.kw = int(kernel)
        self.filters = filters
        self.groups = groups
        self.out_hw = (h - self.kh + 1, w - self.kw + 1)
        m = self.out_hw[0] * self.out_hw[1]
        k = c * self.kh * self.kw
        self.W = Param(f"{name}.kernel",
                       glorot(rng, (groups, filters, m, k), k, filters), kind="local")
        self.b = Param(f"{name}.bias", np.zeros((groups, filters)), kind="local")
        self._pt = None

    def begin(self, x, train=False):
        self._b = x.shape[0]
        b, h, w, c = x.shape
        oh, ow = self.out_hw
        sb, sh, sw, sc = x.strides
        windows = np.lib.stride_tricks.as_strided(
            x, (b, oh, ow, self.kh, self.kw, c), (sb, sh, sw, sh, sw, sc),
            writeable=False)
        # (m, B, K): per-position batched GEMMs against the (m, K, F) kernels
        self._pt = windows.transpose(1, 2, 0, 3, 4, 5).reshape(
            oh * ow, b, self.kh * self.kw * c)

    def group_forward(self, g):
        w = self.W.data[g].transpose(1, 2, 0)               # (m, K, F)
        out = self._pt @ w                                  # (m, B, F)
        out = out.transpose(1, 0, 2) + self.b.data[g]
        return out.reshape(self._b, *self.out_hw, self.filters)

    def group_backward(self, g, dout):
        m = self.out_hw[0] * self.out_hw[1]
        dm = dout.reshape(self._b, m, self.filters)
        dt = np.ascontiguousarray(dm.transpose(1, 0, 2))    # (m, B, F)
        grad_w = self._pt.transpose(0, 2, 1) @ dt           # (m, K, F)
        self.W.grad[g] += grad_w.transpose(2, 0, 1)
        self.b.grad[g] += dm.sum(axis=(0, 1))

    def end_backward(self):
        pass

    def params(self):
        return [self.W, self.b]

    def patterns(self):
        return []

    def weight_scalars_per_filter(self):
        return self.W.data[0, 0].size


class FirstSmoothed:
    """Locally smoothed first layer: shared kernels, per-group smoothers.

    mode selects where the smoother comes from:
      ones      fixed all-ones (reduces to plain convolution)
      free      m trainable scalars per filter
      location  trainable Gaussian (mu, phi) per filter, same for every image
      content   Gaussian parameters regressed from the image by a ParameterNet

    normalize applies the mass-normalized smoother rescaled to unit mean,
    i.e. m * U_p / sum(U): same shape and out-of-window gradient behavior
    as the sum-to-one form, but a uniform smoother multiplies by exactly
    1, so the layer's output stays on the plain-convolution scale instead
    of shrinking by the position count.
    Factor rank d > 1 (several kernel/smoother pairs summed per filter) is
    supported for the ones/free modes; the Gaussian modes are rank 1.
    """

    def __init__(self, in_shape, filters, kernel, rng, mode="location", groups=1,
                 d=1, normalize=True, name="layer1", group_mu_init=None):
        c, h, w = in_shape
        self.kh = self.kw = int(kernel)
        self.filters = filters
        self.groups = groups
        self.mode = mode
        self.d = d
        self.normalize = normalize
        self.out_hw = (h - self.kh + 1, w - self.kw + 1)
        self.grid = sm.PatchGrid.make(*self.out_hw)
        m = self.grid.size
        k = c * self.kh * self.kw
        if mode in ("location", "content") and d != 1:
            raise ValueError("Gaussian smoother modes are factor rank 1")

        self.V = Param(f"{name}.kernel", glorot(rng, (k, filters * d), k, filters),
                       kind="smoothed")
        self.b = Param(f"{name}.bias", np.zeros(filters), kind="smoothed")
        self.U = self.mu = self.phi = self.pnet = None
        if mode == "free":
            self.U = Param(f"{name}.smoother", np.ones((groups, filters, m, d)),
                           kind="smoothed")
        elif mode == "location":
            mu0 = np.empty((groups, filters, 2))
            mu0[:] = 0.5 if group_mu_init is None else \
                np.asarray(group_mu_init, dtype=np.float64)[:, None, :]
            self.mu = Param(f"{name}.mu", mu0, kind="smoothed")
            phi0 = np.tile(np.array([1.0, 1.0, 0.0]), (groups, filters, 1))
            self.phi = Param(f"{name}.phi", phi0, kind="smoothed")
        elif mode == "content":
            bias_init = None
            if group_mu_init is not None:
                bias_init = np.concatenate([
                    np.tile(np.concatenate([np.asarray(mu, dtype=np.float64),
                                            [1.0, 1.0, 0.0]]), filters)
                    for mu in group_mu_init])
            self.pnet = ParameterNet(in_shape, filters * groups, rng,
                                     name=f"{name}.pnet", bias_init=bias_init)
        elif mode != "ones":
            raise ValueError(f"unknown smoother mode {mode!r}")
        self._cache = None

    # -- forward ------------------------------------------------------

    def begin(self, x, train=False):
        b = x.shape[0]
        m = self.grid.size
        flat = im2col_cl(x, self.kh, self.kw).reshape(b * m, -1)
        conv = (flat @ self.V.data).reshape(b, m, self.filters, self.d)
        self._cache = {"flat": flat, "conv": conv, "b": b, "groups": {}}
        if self.mode == "content":
            self._cache["pout"] = self.pnet.forward(x, train)  # group-major slices

    def group_forward(self, g):
        c = self._cache
        b, m = c["b"], self.grid.size
        f, d = self.filters, self.d
        conv = c["conv"]
        gc = {}
        if self.mode == "ones":
            u_used = None
            out = conv.sum(axis=3)  # unit-mean normalization is exactly 1 here
        elif self.mode == "free":
            raw = self.U.data[g]  # (F, m, d)
            u_used = raw * (m / raw.sum(axis=1, keepdims=True)) if self.normalize else raw
            out = np.einsum("bmfd,fmd->bmf", conv, u_used)
            gc["raw"] = raw
        elif self.mode == "location":
            mu, phi = self.mu.data[g], self.phi.data[g]
            raw = sm._forward_many(mu, phi, self.grid.coords)  # (F, m)
            u_used = raw * (m / raw.sum(axis=1, keepdims=True)) if self.normalize else raw
            out = conv[:, :, :, 0] * u_used.T[None]
            gc["raw"] = raw
        else:  # content
            sl = c["pout"][:, g * 5 * f:(g + 1) * 5 * f].reshape(b * f, 5)
            mu, phi = sl[:, :2], sl[:, 2:]
            raw = sm._forward_many(mu, phi, self.grid.coords)  # (B*F, m)
            u_used = raw * (m / raw.sum(axis=1, keepdims=True)) if self.normalize else raw
            out = conv[:, :, :, 0] * u_used.reshape(b, f, m).transpose(0, 2, 1)
            gc.update(raw=raw, mu=mu, phi=phi)
        out = out + self.b.data
        gc["u_used"] = u_used
        c["groups"][g] = gc
        return out.reshape(b, *self.out_hw, f)

    # -- backward -----------------------------------------------------

    def group_backward(self, g, dout):
        c = self._cache
        b, m = c["b"], self.grid.size
        f, d = self.filters, self.d
        gc = c["groups"][g]
        conv = c["conv"]
        dm = dout.reshape(b, m, f)
        self.b.grad += dm.sum(axis=(0, 1))

        u_used = gc["u_used"]
        if self.mode == "ones":
            dconv = np.broadcast_to(dm[:, :, :, None], (b, m, f, d))
        elif self.mode == "free":
            dconv = dm[:, :, :, None] * u_used.transpose(1, 0, 2)[None]
            grad_u_used = np.einsum("bmf,bmfd->fmd", dm, conv)
            raw = gc["raw"]
            if self.normalize:
                for l in range(d):
                    grad_u_used[:, :, l] = sm._normalized_upstream(
                        raw[:, :, l], m * grad_u_used[:, :, l])
            self.U.grad[g] += grad_u_used
        elif self.mode == "location":
            dconv = (dm * u_used.T[None])[:, :, :, None]
            up = np.einsum("bmf,bmf->fm", dm, conv[:, :, :, 0])
            raw = gc["raw"]
            if self.normalize:
                up = sm._normalized_upstream(raw, m * up)
            gmu, gphi = sm._backward_many(self.mu.data[g], self.phi.data[g],
                                          self.grid.coords, raw, up)
            self.mu.grad[g] += gmu
            self.phi.grad[g] += gphi
        else:  # content
            u_t = u_used.reshape(b, f, m).transpose(0, 2, 1)
            dconv = (dm * u_t)[:, :, :, None]
            up = (dm * conv[:, :, :, 0]).transpose(0, 2, 1).reshape(b * f, m)
            raw = gc["raw"]
            if self.normalize:
                up = sm._normalized_upstream(raw, m * up)
            gmu, gphi = sm._backward_many(gc["mu"], gc["phi"], self.grid.coords,
                                          raw, up)
            gslice = np.concatenate([gmu, gphi], axis=1).reshape(b, 5 * f)
            if "dpout" not in c:
                c["dpout"] = np.zeros_like(c["pout"])
            c["dpout"][:, g * 5 * f:(g + 1) * 5 * f] += gslice

        flat_d = np.ascontiguousarray(dconv).reshape(b * m, f * d)
        self.V.grad += c["flat"].T @ flat_d

    def end_backward(self):
        c = self._cache
        if self.mode == "content" and "dpout" in c:
            self.pnet.backward(c["dpout"])

    # -- misc ---------------------------------------------------------

    def smoother_values(self, g):
        """Per-filter smoother vectors as used on the last batch.

        location/free modes: (F, m); content mode: (B, F, m)."""
        gc = self._cache["groups"][g]
        u = gc["u_used"]
        if self.mode == "content":
            return u.reshape(self._cache["b"], self.filters, -1)
        if self.mode == "free":
            return u[:, :, 0]
        return u

    def params(self):
        out = [self.V, self.b]
        for p in (self.U, self.mu, self.phi):
            if p is not None:
                out.append(p)
        if self.pnet is not None:
            out.extend(self.pnet.params())
        return out

    def patterns(self):
        return self.pnet.patterns() if self.pnet is not None else []

    def weight_scalars_per_filter(self):
        n = self.V.data.shape[0] * self.d  # kernel scalars
        if self.mode == "free":
            n += self.grid.size * self.d
        elif self.mode == "location":
            n += 5
        return n
