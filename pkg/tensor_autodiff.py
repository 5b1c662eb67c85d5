"""
Tensor Autodiff for the CMSR super-resolution engine
Minimal reverse-mode automatic differentiation over NCHW numpy arrays.

Every differentiable operation is a `Function` subclass with a numpy forward
and a hand-written backward. Operations executed while some input requires a
gradient are appended to the thread's `ComputationTape`; `backward()` replays
that tape in reverse.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import MissingGradientError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
BICUBIC_A = -0.5

Scalar = Union[int, float]


class Tensor:
    """
    n-dimensional float array with an optional gradient accumulator.

    Image-like tensors use the (batch, channels, height, width) layout.
    Storage is float32 unless float64 is requested explicitly; the float64
    path exists for finite-difference gradient oracles.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool, dtype) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=dtype)
        out.requires_grad = requires_grad
        out.grad = None
        out.is_leaf = not requires_grad
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.dtype)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.dtype.name}, "
                f"requires_grad={self.requires_grad})")


def parameter(data, dtype=None) -> Tensor:
    """Create a leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


# ==================== Computation Tape ====================

@dataclass
class TapeEntry:
    """One recorded operation: its inputs, its output and its backward rule."""
    fn: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class ComputationTape:
    """
    Ordered record of differentiable operations.
    Entries are appended in execution order, so the list is topologically
    sorted by construction.
    """
    entries: List[TapeEntry] = field(default_factory=list)
    _paused: int = 0

    @property
    def recording(self) -> bool:
        return self._paused == 0

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        """Release every intermediate buffer held by the tape."""
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    @contextmanager
    def paused(self) -> Iterator[None]:
        self._paused += 1
        try:
            yield
        finally:
            self._paused -= 1

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` of every requires_grad leaf reachable from `loss`."""
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate(loss, seed)
            return

        pending: Dict[int, np.ndarray] = {id(loss): seed}
        for entry in reversed(self.entries):
            grad = pending.pop(id(entry.output), None)
            if grad is None:
                continue
            input_grads = entry.fn.backward(grad)
            for tensor, tensor_grad in zip(entry.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    _accumulate(tensor, tensor_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + tensor_grad
                else:
                    pending[id(tensor)] = tensor_grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


# One tape per thread: concurrent sessions never share recorded state
_local = threading.local()


def get_tape() -> ComputationTape:
    """Get or create the calling thread's ComputationTape."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    with get_tape().paused():
        yield


def backward(loss: Tensor) -> None:
    get_tape().backward(loss)


# ==================== Function Base ====================

class Function:
    """
    Base class for differentiable operations.

    `forward` receives the numpy data of the input tensors plus keyword
    options and returns the output array. `backward` receives dLoss/dOutput
    and returns one gradient array (or None) per input tensor.
    """

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        dtype = tensors[0].dtype
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        tape = get_tape()
        requires_grad = tape.recording and any(t.requires_grad for t in tensors)
        out = Tensor._from_op(out_data, requires_grad, dtype)
        if requires_grad:
            tape.record(TapeEntry(fn, tensors, out))
        return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ==================== Elementwise ====================

class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class _ScalarAffine(Function):
    """x * factor + offset for python scalars."""

    def forward(self, x, factor: float = 1.0, offset: float = 0.0):
        self.factor = factor
        return x * x.dtype.type(factor) + x.dtype.type(offset)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


def elementwise(kind: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Apply add, sub, mul or scale between a tensor and a tensor or scalar."""
    if not isinstance(b, Tensor):
        b = float(b)
        if kind == "add":
            return _ScalarAffine.apply(a, offset=b)
        if kind == "sub":
            return _ScalarAffine.apply(a, offset=-b)
        if kind in ("mul", "scale"):
            return _ScalarAffine.apply(a, factor=b)
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind == "scale":
        raise ShapeError("scale needs a scalar operand")
    _check_same_shape(a, b, kind)
    if kind == "add":
        return _Add.apply(a, b)
    if kind == "sub":
        return _Sub.apply(a, b)
    if kind == "mul":
        return _Mul.apply(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return elementwise("scale", x, factor)


# ==================== Convolution ====================

def _fold_edge_padding(g: np.ndarray, ph: int, pw: int, h: int, w: int) -> np.ndarray:
    """Adjoint of edge padding: padded rows and columns add onto the border they copy."""
    g = g.copy()
    g[:, :, ph, :] += g[:, :, :ph, :].sum(axis=2)
    g[:, :, ph + h - 1, :] += g[:, :, ph + h:, :].sum(axis=2)
    g = g[:, :, ph:ph + h, :]
    g[:, :, :, pw] += g[:, :, :, :pw].sum(axis=3)
    g[:, :, :, pw + w - 1] += g[:, :, :, pw + w:].sum(axis=3)
    return np.ascontiguousarray(g[:, :, :, pw:pw + w])


class _Conv2d(Function):
    """Edge-replicated 'same' convolution, accumulated one kernel tap at a time."""

    def forward(self, x, w, b):
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        self.ph, self.pw = kh // 2, kw // 2
        self.xp = np.pad(x, ((0, 0), (0, 0), (self.ph, self.ph), (self.pw, self.pw)), mode="edge")
        self.w = w
        self.hw = (h, wd)
        out = np.zeros((n, o, h, wd), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                window = self.xp[:, :, i:i + h, j:j + wd]
                out += np.einsum("nchw,oc->nohw", window, w[:, :, i, j], optimize=True)
        return out + b.reshape(1, o, 1, 1)

    def backward(self, grad):
        h, wd = self.hw
        _, _, kh, kw = self.w.shape
        grad_w = np.zeros_like(self.w)
        grad_xp = np.zeros_like(self.xp)
        for i in range(kh):
            for j in range(kw):
                window = self.xp[:, :, i:i + h, j:j + wd]
                grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", grad, window, optimize=True)
                grad_xp[:, :, i:i + h, j:j + wd] += np.einsum(
                    "nohw,oc->nchw", grad, self.w[:, :, i, j], optimize=True)
        grad_x = _fold_edge_padding(grad_xp, self.ph, self.pw, h, wd)
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


def conv2d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2-D convolution of an NCHW tensor."""
    if x.data.ndim != 4 or weights.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape}, {weights.shape}")
    o, c, kh, kw = weights.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} outputs")
    return _Conv2d.apply(x, weights, bias)


class _Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


# ==================== Resampling ====================

def pixel_coords(normalized: np.ndarray, size: int) -> np.ndarray:
    """Normalized [-1,1] pixel-center coordinates to pixel indices."""
    return ((normalized + 1.0) * size - 1.0) / 2.0


class _GridSample(Function):
    """Bilinear sampling with border clamping; grid channels are (x, y)."""

    def forward(self, image, grid):
        n, c, h, w = image.shape
        self.image_shape = image.shape
        self.image = image
        gx, gy = grid[0, 0], grid[0, 1]
        px, py = pixel_coords(gx, w), pixel_coords(gy, h)
        self.inside_x = (px >= 0) & (px <= w - 1)
        self.inside_y = (py >= 0) & (py <= h - 1)
        px = np.clip(px, 0, w - 1)
        py = np.clip(py, 0, h - 1)
        x0 = np.clip(np.floor(px), 0, max(w - 2, 0)).astype(np.intp)
        y0 = np.clip(np.floor(py), 0, max(h - 2, 0)).astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        wx = (px - x0).astype(image.dtype)
        wy = (py - y0).astype(image.dtype)
        self.idx = (x0, x1, y0, y1)
        self.weights = (wx, wy)

        v00 = image[:, :, y0, x0]
        v01 = image[:, :, y0, x1]
        v10 = image[:, :, y1, x0]
        v11 = image[:, :, y1, x1]
        self.corners = (v00, v01, v10, v11)
        top = v00 + (v01 - v00) * wx
        bottom = v10 + (v11 - v10) * wx
        return top + (bottom - top) * wy

    def backward(self, grad):
        n, c, h, w = self.image_shape
        x0, x1, y0, y1 = self.idx
        wx, wy = self.weights
        v00, v01, v10, v11 = self.corners

        # input gradient: scatter the four bilinear weights
        grad_image = np.zeros(n * c * h * w, dtype=grad.dtype)
        plane = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        for yi, xi, weight in (
            (y0, x0, (1 - wx) * (1 - wy)),
            (y0, x1, wx * (1 - wy)),
            (y1, x0, (1 - wx) * wy),
            (y1, x1, wx * wy),
        ):
            flat = (plane + (yi * w + xi)[None, None]).reshape(-1)
            grad_image += np.bincount(flat, weights=(grad * weight).reshape(-1),
                                      minlength=grad_image.size).astype(grad.dtype)

        d_dpx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_dpy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        grad_gx = (grad * d_dpx).sum(axis=(0, 1)) * (w / 2.0) * self.inside_x
        grad_gy = (grad * d_dpy).sum(axis=(0, 1)) * (h / 2.0) * self.inside_y
        grad_grid = np.stack([grad_gx, grad_gy])[None].astype(grad.dtype)
        return grad_image.reshape(self.image_shape), grad_grid


def grid_sample_bilinear(image: Tensor, grid: Tensor) -> Tensor:
    """Sample `image` at normalized (x, y) grid locations; output takes the grid's size."""
    if image.data.ndim != 4:
        raise ShapeError(f"grid_sample expects NCHW input, got {image.shape}")
    if grid.data.ndim != 4 or grid.shape[:2] != (1, 2):
        raise ShapeError(f"grid must have shape (1, 2, H, W), got {grid.shape}")
    return _GridSample.apply(image, grid)


def cubic_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def cubic_interpolation_matrix(in_size: int, positions: np.ndarray,
                               stretch: float = 1.0) -> np.ndarray:
    """
    Weight matrix evaluating the cubic interpolant of a length-`in_size`
    signal at fractional pixel `positions`.

    `stretch` > 1 widens the kernel support (antialiasing prefilter when
    downsampling). Out-of-range taps repeat the edge sample. Rows are
    normalized to sum to one.
    """
    positions = np.asarray(positions, dtype=np.float64)
    support = 2.0 * stretch
    first = np.floor(positions - support).astype(np.intp) + 1
    n_taps = int(np.ceil(2 * support)) + 1
    taps = first[:, None] + np.arange(n_taps)[None, :]
    weights = cubic_kernel((taps - positions[:, None]) / stretch)
    taps = np.clip(taps, 0, in_size - 1)

    matrix = np.zeros((positions.size, in_size))
    rows = np.repeat(np.arange(positions.size), n_taps)
    np.add.at(matrix, (rows, taps.reshape(-1)), weights.reshape(-1))
    return matrix / matrix.sum(axis=1, keepdims=True)


@lru_cache(maxsize=256)
def bicubic_resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-normalized 1-D bicubic resize operator, out_size x in_size."""
    factor = out_size / in_size
    positions = (np.arange(out_size) + 0.5) / factor - 0.5
    stretch = 1.0 / factor if factor < 1 else 1.0
    matrix = cubic_interpolation_matrix(in_size, positions, stretch)
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=64)
def bicubic_shrink_inverse(out_size: int, in_size: int) -> np.ndarray:
    """
    Minimum-norm right inverse of the bicubic shrink from `out_size` to
    `in_size` samples, shape out_size x in_size.
    """
    shrink = bicubic_resize_matrix(out_size, in_size)
    inverse = np.linalg.pinv(shrink)
    inverse.setflags(write=False)
    return inverse


class _Resize(Function):
    def forward(self, x, out_h: int, out_w: int):
        self.rows = bicubic_resize_matrix(x.shape[2], out_h).astype(x.dtype)
        self.cols = bicubic_resize_matrix(x.shape[3], out_w).astype(x.dtype)
        return self.rows @ x @ self.cols.T

    def backward(self, grad):
        return (self.rows.T @ grad @ self.cols,)


def resize_bicubic(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Catmull-Rom resize of an NCHW tensor, antialiased when shrinking."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    if x.data.ndim != 4:
        raise ShapeError(f"resize expects NCHW input, got {x.shape}")
    return _Resize.apply(x, out_h=out_h, out_w=out_w)


def _block_taps(out_size: int, in_size: int, ratio: int, taps: int) -> np.ndarray:
    """Input indices (edge-clamped) read by each output sample of a blur-downsample."""
    offset = (ratio - taps) // 2
    idx = np.arange(out_size)[:, None] * ratio + offset + np.arange(taps)[None, :]
    return np.clip(idx, 0, in_size - 1)


class _BlurDownsample(Function):
    """Convolve with a user kernel, then keep one sample per r x r block."""

    def forward(self, x, kernel: np.ndarray, ratio: int):
        n, c, h, w = x.shape
        kh, kw = kernel.shape
        self.x_shape = x.shape
        self.kernel = kernel.astype(x.dtype)
        self.rows = _block_taps(h // ratio, h, ratio, kh)
        self.cols = _block_taps(w // ratio, w, ratio, kw)
        out = np.zeros((n, c, h // ratio, w // ratio), dtype=x.dtype)
        for a in range(kh):
            for b in range(kw):
                out += self.kernel[a, b] * x[:, :, self.rows[:, a][:, None], self.cols[:, b][None, :]]
        return out

    def backward(self, grad):
        grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
        kh, kw = self.kernel.shape
        for a in range(kh):
            for b in range(kw):
                np.add.at(grad_x, (slice(None), slice(None),
                                   self.rows[:, a][:, None], self.cols[:, b][None, :]),
                          self.kernel[a, b] * grad)
        return (grad_x,)


def blur_downsample(x: Tensor, kernel: np.ndarray, ratio: int) -> Tensor:
    """Downsample by an integer ratio using an explicit blur kernel."""
    if x.shape[2] % ratio or x.shape[3] % ratio:
        raise ShapeError(f"blur_downsample: {x.shape[2:]} not divisible by {ratio}")
    kernel = np.asarray(kernel)
    if kernel.ndim != 2:
        raise ShapeError(f"blur kernel must be 2-D, got shape {kernel.shape}")
    return _BlurDownsample.apply(x, kernel=kernel, ratio=ratio)


def downsample(x: Tensor, ratio: int, kernel: Optional[np.ndarray] = None) -> Tensor:
    """Shrink by `ratio`: with the given blur kernel, else antialiased bicubic."""
    if kernel is not None:
        return blur_downsample(x, kernel, ratio)
    return resize_bicubic(x, x.shape[2] // ratio, x.shape[3] // ratio)


def upsample(x: Tensor, ratio: int) -> Tensor:
    return resize_bicubic(x, x.shape[2] * ratio, x.shape[3] * ratio)


# ==================== Reductions and Loss ====================

class _Sum(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.x_shape, grad, dtype=grad.dtype),)


def tensor_sum(x: Tensor) -> Tensor:
    return _Sum.apply(x)


class _L1(Function):
    def forward(self, pred, target):
        self.diff = pred - target
        return np.asarray(np.abs(self.diff).mean(dtype=np.float64), dtype=pred.dtype)

    def backward(self, grad):
        g = np.sign(self.diff) * (grad / self.diff.size)
        return g, -g


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at zero is zero."""
    _check_same_shape(pred, target, "l1_loss")
    return _L1.apply(pred, target)


# ==================== Optimizer ====================

@dataclass
class AdamState:
    """Per-parameter first/second moment buffers and step counts."""
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)
    steps: Dict[int, int] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              state: Optional[AdamState] = None) -> AdamState:
    """Bias-corrected Adam update applied in place to `params`."""
    state = state if state is not None else AdamState()
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"parameter {p!r} has no gradient")
        key = id(p)
        g = p.grad.astype(np.float64)
        m = state.m.get(key, np.zeros_like(g))
        v = state.v.get(key, np.zeros_like(g))
        t = state.steps.get(key, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state.m[key], state.v[key], state.steps[key] = m, v, t
    return state


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor]
    lr_factor: float = 1.0


class Adam:
    """Adam over named parameter groups, each scaled by its own lr factor."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, groups: Sequence[ParamGroup], lr: float) -> None:
        for group in groups:
            adam_step(group.params, lr * group.lr_factor, self.beta1,
                      self.beta2, self.eps, self.state)

    @staticmethod
    def zero_grad(groups: Sequence[ParamGroup]) -> None:
        for group in groups:
            for p in group.params:
                p.zero_grad()
