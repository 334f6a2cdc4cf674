"""Network architectures: voxel generator, per-view discriminator set with a
shared convolutional stem, and the 16-way view-bin classifier.

All three are plain torch modules over float32 tensors. The generator maps
latent vectors to occupancy grids in (0, 1) (optionally generating only the
low-x half and mirroring it, which makes outputs exactly x-symmetric). Each
discriminator consumes an (H, W) silhouette and emits one raw score; all its
layers are spectrally normalized. The view classifier reuses the
discriminator topology with batch normalization instead.

Checkpoint container (magic ``MPGCKPT1``): 8-byte magic, a uint32 length and
UTF-8 JSON manifest, a uint32 tensor count, then per tensor: uint16 name
length, name, a dtype byte (0 = float32, 1 = int64), a uint8 rank, uint32
dims, and the little-endian payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
from torch import nn

from .errors import MalformedFileError

CHECKPOINT_MAGIC = b"MPGCKPT1"

VIEW_BIN_COUNT = 16


def _l2normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / (v.norm() + eps)


class SpectralNorm(nn.Module):
    """Divide a layer's weight by its top singular value, estimated with one
    power iteration per training-mode forward (estimates are frozen in eval
    mode so evaluation is deterministic)."""

    def __init__(self, module: nn.Module, warmup_iterations: int = 10):
        super().__init__()
        weight = module.weight
        del module._parameters["weight"]
        self.module = module
        self.warmup_iterations = warmup_iterations
        self.weight = nn.Parameter(weight.detach().clone())
        height = weight.shape[0]
        width = weight.reshape(height, -1).shape[1]
        self.register_buffer("u", _l2normalize(torch.randn(height)))
        self.register_buffer("v", _l2normalize(torch.randn(width)))
        self.warmup()

    def warmup(self):
        with torch.no_grad():
            for _ in range(self.warmup_iterations):
                self._power_iteration()

    def _power_iteration(self):
        # fresh buffer tensors, not copy_: earlier forwards' graphs may still
        # hold references to the previous u/v and must not see them change
        w = self.weight.detach().reshape(self.weight.shape[0], -1)
        v = _l2normalize(torch.mv(w.t(), self.u))
        u = _l2normalize(torch.mv(w, v))
        self.v = v
        self.u = u

    def normalized_weight(self) -> torch.Tensor:
        w = self.weight.reshape(self.weight.shape[0], -1)
        sigma = torch.dot(self.u, torch.mv(w, self.v))
        return self.weight / sigma

    def forward(self, *args):
        if self.training:
            with torch.no_grad():
                self._power_iteration()
        self.module.weight = self.normalized_weight()
        return self.module(*args)


def spectral_layers(module: nn.Module):
    """All SpectralNorm wrappers beneath `module`."""
    return [m for m in module.modules() if isinstance(m, SpectralNorm)]


def _dcgan_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, SpectralNorm):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.module.bias is not None:
                nn.init.zeros_(m.module.bias)
            m.warmup()
        elif isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)) and "weight" in m._parameters:
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def _check_power_of_two(resolution: int, minimum: int = 8):
    if resolution < minimum or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= {minimum}, got {resolution}")


class Generator(nn.Module):
    """Latent vector -> occupancy grid decoder.

    A fully-connected projection to a coarse feature volume is followed by
    upsample + 3x3x3 convolution blocks (batch norm, ReLU) that double the
    spatial size while halving the channel width, and a final convolution
    with a sigmoid. With `symmetric` the decoder produces the low-x half and
    mirrors it across the x = N/2 plane.
    """

    def __init__(self, resolution: int, latent_dim: int = 128,
                 base_channels: int = 128, symmetric: bool = True):
        super().__init__()
        _check_power_of_two(resolution)
        if symmetric and resolution % 2:
            raise ValueError("symmetric generation requires an even resolution")
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.symmetric = symmetric
        n_blocks = resolution.bit_length() - 3  # 4 * 2**n_blocks == resolution
        start = 4
        start_x = start // 2 if symmetric else start
        channels = [max(base_channels >> i, 4) for i in range(n_blocks + 1)]
        self.start_shape = (channels[0], start_x, start, start)
        self.fc = nn.Linear(latent_dim, int(np.prod(self.start_shape)))
        self.fc_norm = nn.BatchNorm3d(channels[0])
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.Upsample(scale_factor=2),
                nn.Conv3d(c_in, c_out, 3, padding=1),
                nn.BatchNorm3d(c_out),
                nn.ReLU(),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv3d(channels[-1], 1, 3, padding=1)
        _dcgan_init(self)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Map (B, latent_dim) noise to (B, N, N, N) occupancies in (0, 1)."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent batch of shape (B, {self.latent_dim}), got {tuple(z.shape)}")
        h = self.fc(z).reshape(z.shape[0], *self.start_shape)
        h = torch.relu(self.fc_norm(h))
        h = self.blocks(h)
        vol = torch.sigmoid(self.head(h)).squeeze(1)
        if self.symmetric:
            vol = torch.cat([vol, vol.flip(1)], dim=1)
        return vol


class DiscriminatorSet(nn.Module):
    """K silhouette discriminators sharing their first convolutional block.

    Every block is a spectrally normalized stride-2 4x4 convolution with
    LeakyReLU(0.2); each head ends in a spectrally normalized linear layer
    emitting one raw score per image (the logistic transform lives in the
    losses).
    """

    def __init__(self, resolution: int, n_heads: int, base_channels: int = 32,
                 shared_blocks: int = 1):
        super().__init__()
        _check_power_of_two(resolution)
        if n_heads < 1:
            raise ValueError("need at least one discriminator head")
        n_blocks = resolution.bit_length() - 2  # stride-2 blocks taking N down to 2
        if not 1 <= shared_blocks < n_blocks:
            raise ValueError(f"shared_blocks must be in [1, {n_blocks - 1}]")
        self.resolution = resolution
        self.n_heads = n_heads
        channels = [1] + [base_channels << i for i in range(n_blocks)]
        feature_dim = channels[-1] * 4  # 2x2 spatial remainder

        def conv_block(c_in, c_out):
            return [SpectralNorm(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)),
                    nn.LeakyReLU(0.2)]

        stem = []
        for i in range(shared_blocks):
            stem += conv_block(channels[i], channels[i + 1])
        self.stem = nn.Sequential(*stem)
        heads = []
        for _ in range(n_heads):
            layers = []
            for i in range(shared_blocks, n_blocks):
                layers += conv_block(channels[i], channels[i + 1])
            layers += [nn.Flatten(), SpectralNorm(nn.Linear(feature_dim, 1))]
            heads.append(nn.Sequential(*layers))
        self.heads = nn.ModuleList(heads)
        _dcgan_init(self)

    def forward(self, images: torch.Tensor, head: int) -> torch.Tensor:
        """Score an (B, H, W) silhouette batch with one head; returns (B,)."""
        if not 0 <= head < self.n_heads:
            raise ValueError(f"head {head} out of range for {self.n_heads} discriminators")
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected {self.resolution}x{self.resolution} silhouettes, got {tuple(images.shape)}")
        return self.heads[head](self.stem(images.unsqueeze(1))).squeeze(1)


class ViewClassifier(nn.Module):
    """Silhouette -> azimuth-bin probabilities, with the discriminator's
    convolutional topology but batch normalization on every block."""

    def __init__(self, resolution: int, base_channels: int = 32, n_bins: int = VIEW_BIN_COUNT):
        super().__init__()
        _check_power_of_two(resolution)
        self.resolution = resolution
        self.n_bins = n_bins
        n_blocks = resolution.bit_length() - 2
        channels = [1] + [base_channels << i for i in range(n_blocks)]
        layers = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1),
                       nn.BatchNorm2d(c_out),
                       nn.LeakyReLU(0.2)]
        layers += [nn.Flatten(), nn.Linear(channels[-1] * 4, n_bins)]
        self.net = nn.Sequential(*layers)
        _dcgan_init(self)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Raw logits, shape (B, n_bins)."""
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected {self.resolution}x{self.resolution} silhouettes, got {tuple(images.shape)}")
        return self.net(images.unsqueeze(1))

    def probabilities(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(images), dim=1)


def latent_batch(rng: np.random.Generator, n: int, dim: int) -> torch.Tensor:
    """Standard-normal latent draws taken from the numpy generator so that
    all run randomness flows from one seed."""
    return torch.from_numpy(rng.standard_normal((n, dim)).astype(np.float32))


def sample_volumes(gen: Generator, n: int, rng: np.random.Generator,
                   batch_size: int = 64) -> np.ndarray:
    """Generate n occupancy grids in eval mode; returns (n, N, N, N) float32."""
    was_training = gen.training
    gen.eval()
    out = []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            z = latent_batch(rng, min(batch_size, n - lo), gen.latent_dim)
            out.append(gen(z).numpy())
    gen.train(was_training)
    return np.concatenate(out, axis=0)


# --- checkpoint container ----------------------------------------------------

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "iu":
        return 1
    raise ValueError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            code = _dtype_code(arr)
            arr = np.asarray(arr, dtype=_DTYPES[code])
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"{path}: not a checkpoint file")
    try:
        pos = 8
        (mlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        manifest = json.loads(blob[pos : pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype)
            if arr.size != max(int(np.prod(shape)), 1):
                raise MalformedFileError(f"{path}: truncated tensor {name}")
            tensors[name] = arr.reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: corrupt checkpoint ({exc})") from exc
    return manifest, tensors


def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for key, ref in module.state_dict().items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise MalformedFileError(f"checkpoint is missing tensor {name}")
        state[key] = torch.from_numpy(tensors[name]).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    index = 0
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p, {})
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    out[f"{prefix}.{index}.{key}"] = val.detach().cpu().numpy()
                else:
                    out[f"{prefix}.{index}.{key}"] = np.asarray(val, dtype=np.float32)
            index += 1
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, tensors: dict[str, np.ndarray], prefix: str) -> None:
    index = 0
    for group in opt.param_groups:
        for p in group["params"]:
            names = {k[len(f"{prefix}.{index}.") :]: k for k in tensors
                     if k.startswith(f"{prefix}.{index}.")}
            if names:
                state = {}
                for key, full in names.items():
                    t = torch.from_numpy(tensors[full].copy())
                    if key == "step":
                        t = t.reshape(())
                    else:
                        t = t.reshape(p.shape)
                    state[key] = t
                opt.state[p] = state
            index += 1
