"""MAC staggered grid on the unit square: storage, ghost fills, stencils.

Every field is a plain 2-D ``numpy`` array carrying a one-point ghost frame.
The staggering is read off the array shape (axis 0 is x, axis 1 is y):

============  ===================  ==========================================
kind          shape                array index ``[a, b]`` holds
============  ===================  ==========================================
``"c"``       ``(n+2, n+2)``       cell centre ``((a-1/2) h, (b-1/2) h)``
``"ew"``      ``(n+3, n+2)``       east-west edge ``((a-1) h, (b-1/2) h)``
``"ns"``      ``(n+2, n+3)``       north-south edge ``((a-1/2) h, (b-1) h)``
``"corner"``  ``(n+3, n+3)``       vertex ``((a-1) h, (b-1) h)``
============  ===================  ==========================================

So logical index ``i`` (cell ``i+1/2`` or edge ``i``) lives at ``a = i + 1``
and the ``n x n`` block ``[1:n+1, 1:n+1]`` is the range summed by the discrete
inner products for every staggering.

Operators never branch on boundary indices: they read ghost values, which the
fill routines set from the boundary mode.  Output entries that a stencil cannot
reach are left at zero; callers fill ghosts on results they reuse.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import NonZeroMean, StaggeringError


class BcMode(str, Enum):
    """Boundary treatment shared by every field of a run."""

    #: Neumann scalars, no-penetration + free-slip velocity.
    PHYSICAL = "physical"
    PERIODIC = "periodic"


class MacVelocity:
    """Velocity pair: ``x`` on east-west edges, ``y`` on north-south edges."""

    __slots__ = ("x", "y")

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = x
        self.y = y

    def __iter__(self):
        yield self.x
        yield self.y

    def __add__(self, other):
        return MacVelocity(self.x + other.x, self.y + other.y)

    def __sub__(self, other):
        return MacVelocity(self.x - other.x, self.y - other.y)

    def __mul__(self, s):
        return MacVelocity(s * self.x, s * self.y)

    __rmul__ = __mul__

    def __neg__(self):
        return MacVelocity(-self.x, -self.y)

    def copy(self):
        return MacVelocity(self.x.copy(), self.y.copy())

    def __repr__(self):
        return f"MacVelocity(x{self.x.shape}, y{self.y.shape})"


_DIFF_KINDS = {
    # kind: (source staggering, axis, target staggering)
    "center_x": ("c", 0, "ew"),
    "center_y": ("c", 1, "ns"),
    "ew_x": ("ew", 0, "c"),
    "ew_y": ("ew", 1, "corner"),
    "ns_x": ("ns", 0, "corner"),
    "ns_y": ("ns", 1, "c"),
}


@dataclass(frozen=True)
class Grid:
    """Uniform ``n x n`` MAC grid on (0, 1)^2 with spacing ``h = 1/n``."""

    n: int
    bc: BcMode = BcMode.PHYSICAL

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs n >= 2, got {self.n!r}")
        object.__setattr__(self, "bc", BcMode(self.bc))

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def periodic(self) -> bool:
        return self.bc is BcMode.PERIODIC

    @cached_property
    def shapes(self) -> dict:
        n = self.n
        return {
            "c": (n + 2, n + 2),
            "ew": (n + 3, n + 2),
            "ns": (n + 2, n + 3),
            "corner": (n + 3, n + 3),
        }

    @property
    def block(self):
        return (slice(1, self.n + 1), slice(1, self.n + 1))

    # ------------------------------------------------------------------
    # allocation and sampling

    def kind_of(self, f: np.ndarray) -> str:
        for kind, shape in self.shapes.items():
            if f.shape == shape:
                return kind
        raise StaggeringError(f"array of shape {f.shape} does not live on an n={self.n} grid")

    def _expect(self, f, kind):
        if f.shape != self.shapes[kind]:
            raise StaggeringError(
                f"expected a {kind!r} field of shape {self.shapes[kind]}, got {f.shape}"
            )

    def zeros(self, kind: str = "c") -> np.ndarray:
        return np.zeros(self.shapes[kind])

    def zero_velocity(self) -> MacVelocity:
        return MacVelocity(self.zeros("ew"), self.zeros("ns"))

    def coords(self, kind: str = "c"):
        """Physical coordinates ``(X, Y)`` of every stored point, ghosts included."""
        nx, ny = self.shapes[kind]
        h = self.h
        ox = 0.5 if kind in ("c", "ns") else 1.0
        oy = 0.5 if kind in ("c", "ew") else 1.0
        x = (np.arange(nx) - ox) * h
        y = (np.arange(ny) - oy) * h
        return np.meshgrid(x, y, indexing="ij")

    def sample(self, func, kind: str = "c") -> np.ndarray:
        """Evaluate ``func(X, Y)`` on the logical points of ``kind`` and fill ghosts."""
        X, Y = self.coords(kind)
        f = np.asarray(func(X, Y), dtype=float) * np.ones_like(X)
        return self.fill(f)

    def sample_velocity(self, fx, fy) -> MacVelocity:
        return self.fill_velocity(MacVelocity(self.sample(fx, "ew"), self.sample(fy, "ns")))

    # ------------------------------------------------------------------
    # ghost fills (in place; public wrappers copy)

    def _fill_cell(self, f):
        n = self.n
        if self.periodic:
            f[0, :] = f[n, :]
            f[n + 1, :] = f[1, :]
            f[:, 0] = f[:, n]
            f[:, n + 1] = f[:, 1]
        else:
            f[0, :] = f[1, :]
            f[n + 1, :] = f[n, :]
            f[:, 0] = f[:, 1]
            f[:, n + 1] = f[:, n]
        return f

    def _fill_normal(self, f, axis):
        """Fill along the axis normal to the edges ``f`` lives on."""
        n = self.n
        g = f if axis == 0 else f.T
        if self.periodic:
            g[n + 1] = g[1]
            g[0] = g[n]
            g[n + 2] = g[2]
        else:
            g[1] = 0.0
            g[n + 1] = 0.0
            g[0] = -g[2]
            g[n + 2] = -g[n]

    def _fill_tangential(self, f, axis):
        n = self.n
        g = f if axis == 0 else f.T
        if self.periodic:
            g[0] = g[n]
            g[n + 1] = g[1]
        else:
            g[0] = g[1]
            g[n + 1] = g[n]

    def _fill_ew(self, f):
        self._fill_normal(f, 0)
        self._fill_tangential(f, 1)
        return f

    def _fill_ns(self, f):
        self._fill_normal(f, 1)
        self._fill_tangential(f, 0)
        return f

    def fill(self, f: np.ndarray, inplace: bool = False) -> np.ndarray:
        """Ghost-fill a cell or edge field according to the grid's boundary mode."""
        kind = self.kind_of(f)
        g = f if inplace else f.copy()
        if kind == "c":
            return self._fill_cell(g)
        if kind == "ew":
            return self._fill_ew(g)
        if kind == "ns":
            return self._fill_ns(g)
        raise StaggeringError("corner fields carry no ghost convention")

    def fill_ghost_scalar(self, f: np.ndarray) -> np.ndarray:
        self._expect(f, "c")
        return self._fill_cell(f.copy())

    def fill_velocity(self, u: MacVelocity, inplace: bool = False) -> MacVelocity:
        self._expect(u.x, "ew")
        self._expect(u.y, "ns")
        if not inplace:
            u = u.copy()
        self._fill_ew(u.x)
        self._fill_ns(u.y)
        return u

    fill_ghost_velocity = fill_velocity

    # ------------------------------------------------------------------
    # difference operators

    def diff(self, kind: str, f: np.ndarray) -> np.ndarray:
        """Two-point divided difference ``D^c``, ``D^ew`` or ``D^ns`` along x or y.

        ``kind`` is one of ``center_x, center_y, ew_x, ew_y, ns_x, ns_y``;
        the result lives on the staggering the difference maps to.
        """
        try:
            src, axis, dst = _DIFF_KINDS[kind]
        except KeyError:
            raise ValueError(f"unknown difference kind {kind!r}") from None
        self._expect(f, src)
        out = self.zeros(dst)
        n, h = self.n, self.h
        g = f if axis == 0 else f.T
        o = out if axis == 0 else out.T
        if src == "c" or (src, dst) in (("ew", "corner"), ("ns", "corner")):
            # target index a reads source a and a-1
            o[1 : n + 2] = (g[1 : n + 2] - g[0 : n + 1]) / h
        else:
            # edge -> cell: target a reads source a+1 and a
            o[0 : n + 2] = (g[1 : n + 3] - g[0 : n + 2]) / h
        return out

    def diff_long(self, axis: int, f: np.ndarray) -> np.ndarray:
        """Centred difference ``(f[i+1] - f[i-1]) / 2h`` on an edge field."""
        kind = self.kind_of(f)
        if kind not in ("ew", "ns"):
            raise StaggeringError("long-stencil differences act on edge fields")
        out = np.zeros_like(f)
        g = f if axis == 0 else f.T
        o = out if axis == 0 else out.T
        o[1:-1] = (g[2:] - g[:-2]) / (2.0 * self.h)
        return out

    def grad(self, f: np.ndarray) -> MacVelocity:
        self._expect(f, "c")
        return MacVelocity(self.diff("center_x", f), self.diff("center_y", f))

    def div(self, u: MacVelocity) -> np.ndarray:
        return self.diff("ew_x", u.x) + self.diff("ns_y", u.y)

    def lap(self, f: np.ndarray) -> np.ndarray:
        """Five-point Laplacian on any staggering; ghost entries of the result are zero."""
        self.kind_of(f)
        out = np.zeros_like(f)
        out[1:-1, 1:-1] = (
            f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4.0 * f[1:-1, 1:-1]
        ) / self.h**2
        return out

    def lap_velocity(self, u: MacVelocity) -> MacVelocity:
        return MacVelocity(self.lap(u.x), self.lap(u.y))

    # ------------------------------------------------------------------
    # averages

    def average(self, kind: str, f: np.ndarray) -> np.ndarray:
        """Arithmetic means onto another staggering.

        ``Ax``: cell -> ew, ``Ay``: cell -> ns, ``Axy_x``: ew -> ns (four
        neighbouring x-edges), ``Axy_y``: ns -> ew.
        """
        n = self.n
        if kind == "Ax":
            self._expect(f, "c")
            out = self.zeros("ew")
            out[1 : n + 2] = 0.5 * (f[0 : n + 1] + f[1 : n + 2])
        elif kind == "Ay":
            self._expect(f, "c")
            out = self.zeros("ns")
            out[:, 1 : n + 2] = 0.5 * (f[:, 0 : n + 1] + f[:, 1 : n + 2])
        elif kind == "Axy_x":
            self._expect(f, "ew")
            out = self.zeros("ns")
            out[:, 1 : n + 2] = 0.25 * (
                f[0 : n + 2, 0 : n + 1]
                + f[0 : n + 2, 1 : n + 2]
                + f[1 : n + 3, 0 : n + 1]
                + f[1 : n + 3, 1 : n + 2]
            )
        elif kind == "Axy_y":
            self._expect(f, "ns")
            out = self.zeros("ew")
            out[1 : n + 2, :] = 0.25 * (
                f[0 : n + 1, 0 : n + 2]
                + f[1 : n + 2, 0 : n + 2]
                + f[0 : n + 1, 1 : n + 3]
                + f[1 : n + 2, 1 : n + 3]
            )
        else:
            raise ValueError(f"unknown average kind {kind!r}")
        return out

    # ------------------------------------------------------------------
    # inner products and norms

    def inner(self, f, g) -> float:
        """h^2-weighted sum over the n x n block; vectors add their components."""
        if isinstance(f, MacVelocity):
            return self.inner(f.x, g.x) + self.inner(f.y, g.y)
        if f.shape != g.shape:
            raise StaggeringError(f"inner product of mismatched fields {f.shape} vs {g.shape}")
        self.kind_of(f)
        b = self.block
        return float(self.h**2 * np.sum(f[b] * g[b]))

    def norm(self, f, p=2) -> float:
        """Discrete l^p norm over the block; ``p`` may be ``np.inf``."""
        if isinstance(f, MacVelocity):
            if p == np.inf:
                return max(self.norm(f.x, p), self.norm(f.y, p))
            return (self.norm(f.x, p) ** p + self.norm(f.y, p) ** p) ** (1.0 / p)
        self.kind_of(f)
        vals = np.abs(f[self.block])
        if p == np.inf:
            return float(vals.max())
        if p == 2:
            return float(np.sqrt(self.h**2 * np.sum(vals * vals)))
        return float((self.h**2 * np.sum(vals**p)) ** (1.0 / p))

    def mean(self, f: np.ndarray) -> float:
        """``<f, 1>_c``; equals the spatial average on the unit square."""
        self._expect(f, "c")
        return float(self.h**2 * np.sum(f[self.block]))

    mean_c = mean

    def grad_norm_sq(self, f) -> float:
        """``||grad_h f||_2^2`` for a cell field or a velocity."""
        if isinstance(f, MacVelocity):
            return (
                self.inner(self.diff("ew_x", f.x), self.diff("ew_x", f.x))
                + self.inner(self.diff("ew_y", f.x), self.diff("ew_y", f.x))
                + self.inner(self.diff("ns_x", f.y), self.diff("ns_x", f.y))
                + self.inner(self.diff("ns_y", f.y), self.diff("ns_y", f.y))
            )
        return self.inner(self.grad(f), self.grad(f))

    # ------------------------------------------------------------------
    # packing of unknowns for the linear solvers

    @cached_property
    def _vel_slices(self):
        n = self.n
        if self.periodic:
            return self.block, self.block
        return (slice(2, n + 1), slice(1, n + 1)), (slice(1, n + 1), slice(2, n + 1))

    def pack(self, f: np.ndarray) -> np.ndarray:
        self._expect(f, "c")
        return f[self.block].ravel().copy()

    def unpack(self, v: np.ndarray) -> np.ndarray:
        f = self.zeros("c")
        f[self.block] = v.reshape(self.n, self.n)
        return self._fill_cell(f)

    def pack_velocity(self, u: MacVelocity) -> np.ndarray:
        sx, sy = self._vel_slices
        return np.concatenate([u.x[sx].ravel(), u.y[sy].ravel()])

    def unpack_velocity(self, v: np.ndarray) -> MacVelocity:
        sx, sy = self._vel_slices
        u = self.zero_velocity()
        shx = u.x[sx].shape
        k = shx[0] * shx[1]
        u.x[sx] = v[:k].reshape(shx)
        u.y[sy] = v[k:].reshape(u.y[sy].shape)
        return self.fill_velocity(u, inplace=True)

    @property
    def velocity_size(self) -> int:
        return 2 * self.n * (self.n if self.periodic else self.n - 1)

    # ------------------------------------------------------------------
    # inverse Laplacian and the dual norm

    def inv_neumann_laplacian(self, f: np.ndarray, tol: float = 1e-12, max_iter=None) -> np.ndarray:
        """Mean-zero ``psi`` with ``-lap_h psi = f`` under the grid's closure."""
        from .linsolve import solve_spd

        self._expect(f, "c")
        rhs = self.pack(f)
        rms = np.sqrt(np.mean(rhs**2))
        if abs(rhs.mean()) > 1e-12 * max(rms, np.finfo(float).tiny):
            raise NonZeroMean(f"mean {rhs.mean():.3e} of a field with rms {rms:.3e}")
        x, _ = solve_spd(self.poisson_operator(), rhs, tol=tol,
                         max_iter=max_iter or 20 * self.n, project_mean=True)
        return self.unpack(x)

    def neg_lap_operator(self, v: np.ndarray) -> np.ndarray:
        return -self.pack(self.lap(self.unpack(v)))

    @cached_property
    def _poisson_inverse(self):
        return self.spectral_solver(0.0, 1.0)

    def poisson_operator(self):
        """``-lap_h`` on packed cell unknowns, preconditioned by its fast inverse."""
        from .linsolve import LinearOperator

        return LinearOperator(self.neg_lap_operator, symmetric=True,
                              preconditioner=self._poisson_inverse)

    def norm_minus1(self, f: np.ndarray, tol: float = 1e-12) -> float:
        psi = self.inv_neumann_laplacian(f, tol=tol)
        return float(np.sqrt(max(self.inner(f, psi), 0.0)))

    # ------------------------------------------------------------------
    # fast transforms: the 5-point Laplacian is diagonal in the sine/cosine
    # (or Fourier) basis matching each closure

    def _axis_closures(self, kind: str):
        if self.periodic:
            return ("periodic", "periodic")
        return {"c": ("neumann", "neumann"), "ux": ("dirichlet", "neumann"),
                "uy": ("neumann", "dirichlet")}[kind]

    def _symbol_1d(self, closure: str) -> np.ndarray:
        n, h = self.n, self.h
        if closure == "periodic":
            k = np.arange(n)
            return 4.0 / h**2 * np.sin(np.pi * k / n) ** 2
        if closure == "neumann":
            k = np.arange(n)
        else:
            k = np.arange(1, n)
        return 4.0 / h**2 * np.sin(np.pi * k / (2 * n)) ** 2

    def spectral_solver(self, a: float, b: float = 0.0, c: float = 0.0, kind: str = "c"):
        """Exact solver for ``(a + b A + c A^2) x = r`` with ``A = -lap_h``.

        ``kind`` selects cell unknowns (``"c"``) or packed velocity components
        (``"ux"``, ``"uy"``).  Returns a function on flat vectors.  A zero
        symbol (``a = 0``, constant mode) maps to zero, i.e. the mean-zero
        solution.
        """
        from scipy import fft

        cx, cy = self._axis_closures(kind)
        lam = self._symbol_1d(cx)[:, None] + self._symbol_1d(cy)[None, :]
        sym = a + b * lam + c * lam**2
        inv = np.divide(1.0, sym, out=np.zeros_like(sym), where=np.abs(sym) > 1e-300)
        shape = lam.shape

        if self.periodic:
            def solve(r):
                return fft.ifft2(fft.fft2(r.reshape(shape)) * inv).real.ravel()
            return solve

        def forward(r):
            for axis, cl in ((0, cx), (1, cy)):
                r = (fft.dct(r, type=2, axis=axis, norm="ortho") if cl == "neumann"
                     else fft.dst(r, type=1, axis=axis, norm="ortho"))
            return r

        def backward(r):
            for axis, cl in ((0, cx), (1, cy)):
                r = (fft.idct(r, type=2, axis=axis, norm="ortho") if cl == "neumann"
                     else fft.idst(r, type=1, axis=axis, norm="ortho"))
            return r

        def solve(r):
            return backward(forward(r.reshape(shape)) * inv).ravel()

        return solve

    # ------------------------------------------------------------------
    # assembled 1-D building blocks (used for preconditioners)

    def laplacian_1d(self, size: int, closure: str):
        """Sparse second difference (unscaled) with ``closure`` in {periodic, neumann, dirichlet}."""
        import scipy.sparse as sp

        main = -2.0 * np.ones(size)
        off = np.ones(size - 1)
        L = sp.diags([off, main, off], [-1, 0, 1], format="lil")
        if closure == "periodic":
            L[0, size - 1] += 1.0
            L[size - 1, 0] += 1.0
        elif closure == "neumann":
            L[0, 0] += 1.0
            L[size - 1, size - 1] += 1.0
        elif closure != "dirichlet":
            raise ValueError(closure)
        return L.tocsr()

    def neg_lap_matrix(self):
        """Assembled ``-lap_h`` on packed cell unknowns."""
        import scipy.sparse as sp

        n = self.n
        L = self.laplacian_1d(n, "periodic" if self.periodic else "neumann")
        eye = sp.identity(n, format="csr")
        return (-(sp.kron(L, eye) + sp.kron(eye, L)) / self.h**2).tocsc()

    def vector_lap_matrices(self):
        """Assembled ``lap_h`` for packed ``u.x`` and ``u.y`` unknowns."""
        import scipy.sparse as sp

        n = self.n
        if self.periodic:
            L = self.laplacian_1d(n, "periodic")
            eye = sp.identity(n, format="csr")
            A = (sp.kron(L, eye) + sp.kron(eye, L)) / self.h**2
            return A.tocsc(), A.tocsc()
        Ld = self.laplacian_1d(n - 1, "dirichlet")
        Ln = self.laplacian_1d(n, "neumann")
        Id = sp.identity(n - 1, format="csr")
        In = sp.identity(n, format="csr")
        Ax = (sp.kron(Ld, In) + sp.kron(Id, Ln)) / self.h**2
        Ay = (sp.kron(Ln, Id) + sp.kron(In, Ld)) / self.h**2
        return Ax.tocsc(), Ay.tocsc()
