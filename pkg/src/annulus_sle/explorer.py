"""Harmonic explorer on a symmetric hexagonal annulus.

Faces of the honeycomb lattice are addressed by axial coordinates (q, r);
the face at hex distance d = max(|q|, |r|, |q + r|) from the origin lies
in the domain when ``inner_radius < d <= outer_radius``.  Faces with
d <= inner_radius form the hole.  The outer ring (d = outer_radius) is
split into a black upper arc and a white lower arc at the boundary
vertices v+ and v- = -v+.  Faces of the ring d = inner_radius + 1 touch the
inner boundary.

Vertices carry exact integer keys: with unit side length, the centre of
face (q, r) is (sqrt(3)/2 X, Y/2) with X = 2q + r and Y = 3r, and its six
corners sit at integer offsets of (X, Y).  Negation of faces and vertices
is then exact.

Two variants of the explorer function H_n are supported:

``dirichlet0``
    H = 1 on black faces, -1 on white faces, 0 on every face touching the
    inner boundary (whatever its colour), harmonic elsewhere.
``all_harmonic``
    H = +-1 on coloured faces and harmonic at every uncoloured face,
    including those touching the inner boundary, where the mean runs over
    neighbours inside the domain.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import cg

from .errors import ConvergenceError, DomainError, GeometryError, StateError

MODES = ("dirichlet0", "all_harmonic")
UNCOLORED, BLACK, WHITE = 0, 1, -1
SOLVE_TOL = 1e-10

_NBR = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))
_CORNERS = ((1, 1), (0, 2), (-1, 1), (-1, -1), (0, -2), (1, -1))


def hex_dist(q, r):
    return max(abs(q), abs(r), abs(q + r))


def _corners(face):
    q, r = face
    X, Y = 2 * q + r, 3 * r
    return [(X + dx, Y + dy) for dx, dy in _CORNERS]


def vertex_xy(v):
    return (math.sqrt(3) / 2 * v[0], v[1] / 2)


def face_xy(face):
    q, r = face
    return (math.sqrt(3) * (q + r / 2), 1.5 * r)


def _faces_at(v):
    # the three lattice faces sharing vertex v
    X, Y = v
    out = []
    for dx, dy in _CORNERS:
        fx, fy = X - dx, Y - dy
        if fy % 3 == 0:
            r = fy // 3
            if (fx - r) % 2 == 0:
                out.append(((fx - r) // 2, r))
    return out


@dataclass
class HexDomain:
    """Symmetric doubly connected set of hexagonal faces."""

    outer_radius: int
    inner_radius: int
    faces: list
    index: dict
    neighbors: list
    labels: np.ndarray
    inner: np.ndarray
    outer: np.ndarray
    negation: np.ndarray
    v_plus: tuple
    v_minus: tuple
    vertices: set = field(repr=False, default_factory=set)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def kind(self, face) -> str:
        """'domain', 'hole' or 'outside' for any lattice face."""
        d = hex_dist(*face)
        if d <= self.inner_radius:
            return "hole"
        return "domain" if d <= self.outer_radius else "outside"

    def on_inner_boundary(self, v) -> bool:
        return any(self.kind(f) == "hole" for f in _faces_at(v))

    def on_outer_boundary(self, v) -> bool:
        return any(self.kind(f) == "outside" for f in _faces_at(v))

    def edge_faces(self, u, v):
        """The two lattice faces sharing the edge [u, v]."""
        both = set(_faces_at(u)) & set(_faces_at(v))
        if len(both) != 2:
            raise StateError(f"{u} and {v} are not adjacent vertices")
        return tuple(both)


def build_domain(outer_radius: int, inner_radius: int, v_plus_angle: float = 0.0) -> HexDomain:
    """Hexagonal annulus with its boundary arcs coloured.

    Parameters
    ----------
    outer_radius, inner_radius : int
        Hex-distance radii; requires ``outer_radius >= inner_radius + 3``.
    v_plus_angle : float
        Target polar angle of v+; the outer-boundary vertex between two
        ring faces closest to this angle is used.  Must give Re v+ > 0.
    """
    if inner_radius < 0 or outer_radius < inner_radius + 3:
        raise GeometryError("need outer_radius >= inner_radius + 3 and inner_radius >= 0")
    faces = [(q, r) for q in range(-outer_radius, outer_radius + 1)
             for r in range(-outer_radius, outer_radius + 1)
             if inner_radius < hex_dist(q, r) <= outer_radius]
    faces.sort(key=lambda f: (hex_dist(*f), math.atan2(face_xy(f)[1], face_xy(f)[0])))
    index = {f: i for i, f in enumerate(faces)}
    neighbors = [np.array([index[(q + a, r + b)] for a, b in _NBR if (q + a, r + b) in index])
                 for q, r in faces]
    negation = np.array([index.get((-q, -r), -1) for q, r in faces])
    if np.any(negation < 0) or np.any(negation[negation] != np.arange(len(faces))):
        raise GeometryError("face set is not symmetric under negation")
    d = np.array([hex_dist(*f) for f in faces])
    inner = d == inner_radius + 1
    outer = d == outer_radius
    vertices = {v for f in faces for v in _corners(f)}

    dom = HexDomain(outer_radius, inner_radius, faces, index, neighbors,
                    np.zeros(len(faces), dtype=int), inner, outer, negation, None, None, vertices)

    # candidate v+: outer boundary vertices shared by two ring faces
    cands = []
    for v in vertices:
        fs = _faces_at(v)
        ins = [f for f in fs if f in index]
        if len(ins) == 2 and dom.on_outer_boundary(v):
            x, y = vertex_xy(v)
            cands.append((abs(math.remainder(math.atan2(y, x) - v_plus_angle, 2 * math.pi)), v))
    if not cands:
        raise GeometryError("no admissible boundary vertex")
    v_plus = min(cands)[1]
    if vertex_xy(v_plus)[0] <= 0:
        raise GeometryError("v_plus must have positive real part")
    v_minus = (-v_plus[0], -v_plus[1])
    dom.v_plus, dom.v_minus = v_plus, v_minus

    th = math.atan2(vertex_xy(v_plus)[1], vertex_xy(v_plus)[0])
    for i in np.flatnonzero(outer):
        x, y = face_xy(faces[i])
        rel = (math.atan2(y, x) - th) % (2 * math.pi)
        dom.labels[i] = BLACK if rel < math.pi else WHITE
    a, b = [index[f] for f in _faces_at(v_plus) if f in index]
    if dom.labels[a] == dom.labels[b]:
        raise GeometryError("v_plus does not separate the two boundary arcs")
    if np.any(dom.labels[negation] != -dom.labels):
        raise GeometryError("initial colouring is not antisymmetric")
    _check_connectivity(dom)
    return dom


def _check_connectivity(dom: HexDomain):
    seen = np.zeros(dom.n_faces, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in dom.neighbors[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        raise GeometryError("domain is not connected")
    ring = np.flatnonzero(dom.inner)
    for i in ring:
        if np.count_nonzero(dom.inner[dom.neighbors[i]]) != 2:
            raise GeometryError("inner boundary ring is not a simple cycle")


# ---------------------------------------------------------------- harmonic solves

def _fixed_values(dom: HexDomain, colors, mode):
    """Boolean mask of faces with prescribed values, and those values."""
    colors = np.asarray(colors)
    fixed = colors != UNCOLORED
    val = colors.astype(float)
    if mode == "dirichlet0":
        fixed = fixed | dom.inner
        val = np.where(dom.inner, 0.0, val)
    elif mode != "all_harmonic":
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    return fixed, val


def _laplacian(dom: HexDomain, free):
    pos = -np.ones(dom.n_faces, dtype=int)
    pos[free] = np.arange(free.size)
    rows, cols, data = [], [], []
    for k, i in enumerate(free):
        nb = dom.neighbors[i]
        rows.append(k)
        cols.append(k)
        data.append(float(nb.size))
        for j in nb:
            if pos[j] >= 0:
                rows.append(k)
                cols.append(pos[j])
                data.append(-1.0)
    return csr_matrix((data, (rows, cols)), shape=(free.size, free.size)), pos


def solve_harmonic(dom: HexDomain, colors, mode: str = "dirichlet0", tol: float = SOLVE_TOL,
                   x0=None, max_iter: int = 10_000):
    """Explorer function H for the given colouring.

    Solves the symmetric positive definite system deg(f) H(f) - sum H(g) = 0
    at the free faces with conjugate gradients.

    Parameters
    ----------
    x0 : ndarray, optional
        Full-length warm start (e.g. the previous step's solution).

    Returns
    -------
    ndarray
        Values on all faces of the domain.

    Raises
    ------
    ConvergenceError
        If CG does not reach ``tol`` within ``max_iter`` iterations.
    """
    fixed, val = _fixed_values(dom, colors, mode)
    free = np.flatnonzero(~fixed)
    H = np.where(fixed, val, 0.0)
    if free.size == 0:
        return H
    A, pos = _laplacian(dom, free)
    b = np.zeros(free.size)
    for k, i in enumerate(free):
        nb = dom.neighbors[i]
        b[k] = val[nb[fixed[nb]]].sum()
    guess = None if x0 is None else np.asarray(x0, dtype=float)[free]
    # absolute tolerance in the residual, scaled by the largest degree
    x, info = cg(A, b, x0=guess, rtol=0.0, atol=tol, maxiter=max_iter)
    if info != 0:
        raise ConvergenceError(f"CG stopped with info={info}")
    H[free] = x
    return H


def harmonic_residual(dom: HexDomain, colors, H, mode: str = "dirichlet0") -> float:
    """Largest |H(f) - mean of neighbours| over the free faces."""
    fixed, _ = _fixed_values(dom, colors, mode)
    free = np.flatnonzero(~fixed)
    if free.size == 0:
        return 0.0
    return float(max(abs(H[i] - H[dom.neighbors[i]].mean()) for i in free))


class _Green:
    """Inverse of the free-face Laplacian, downdated as faces become fixed.

    Fixing face k to the value c changes the solution by
    (c - H(k)) G[:, k] / G[k, k], the discrete harmonic measure of k.
    """

    def __init__(self, dom, colors, mode):
        fixed, val = _fixed_values(dom, colors, mode)
        self.free = np.flatnonzero(~fixed)
        A, self.pos = _laplacian(dom, self.free)
        self.G = np.linalg.inv(A.toarray())
        self.H = solve_harmonic(dom, colors, mode)
        self.active = np.ones(self.free.size, dtype=bool)

    def copy(self):
        new = object.__new__(_Green)
        new.free, new.pos = self.free, self.pos
        new.G = self.G.copy()
        new.H = self.H.copy()
        new.active = self.active.copy()
        return new

    def fix(self, faces, values):
        for i, c in zip(faces, values):
            k = self.pos[i]
            if k < 0 or not self.active[k]:
                continue
            g = self.G[:, k].copy()
            w = g / g[k]
            self.H[self.free] += (c - self.H[i]) * w
            self.H[i] = c
            self.G -= np.outer(w, g)
            self.active[k] = False
            self.G[k, :] = 0.0
            self.G[:, k] = 0.0


_GREEN_CACHE: dict = {}


def _green_for(dom: HexDomain, mode: str) -> _Green:
    # ids are reused once a domain is collected, so keep the domain and compare
    key = (id(dom), mode)
    hit = _GREEN_CACHE.get(key)
    if hit is None or hit[0] is not dom:
        hit = _GREEN_CACHE[key] = (dom, _Green(dom, dom.labels, mode))
    return hit[1].copy()


# ---------------------------------------------------------------- exploration

@dataclass
class ExplorerState:
    """Colours, the two tip paths and the current explorer function."""

    domain: HexDomain
    colors: np.ndarray
    alpha_plus: list
    alpha_minus: list
    mode: str = "dirichlet0"
    n: int = 0
    finished: bool = False
    H: np.ndarray | None = None
    log: list = field(default_factory=list)
    _green: _Green | None = field(default=None, repr=False)


def initial_state(dom: HexDomain, mode: str = "dirichlet0") -> ExplorerState:
    """State at time 0: both tips moved one edge inward from v+ and v-."""
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    first = []
    for v in (dom.v_plus, dom.v_minus):
        a, b = [f for f in _faces_at(v) if f in dom.index]
        nxt = (set(_corners(a)) & set(_corners(b))) - {v}
        if len(nxt) != 1:
            raise StateError("initial edge at the boundary vertex is not unique")
        first.append(nxt.pop())
    g = _green_for(dom, mode)
    st = ExplorerState(dom, dom.labels.copy(), [dom.v_plus, first[0]], [dom.v_minus, first[1]],
                       mode, 0, False, g.H, [], g)
    st.finished = dom.on_inner_boundary(first[0])
    return st


def _next_face(st: ExplorerState):
    # third face at the tip, plus the two faces of the incoming edge
    dom = st.domain
    u, v = st.alpha_plus[-2], st.alpha_plus[-1]
    a, b = dom.edge_faces(u, v)
    third = [f for f in _faces_at(v) if f not in (a, b)]
    if len(third) != 1:
        raise StateError("tip vertex does not have three faces")
    return a, b, third[0]


def _advance(st: ExplorerState, path):
    dom = st.domain
    u, v = path[-2], path[-1]
    a, b = dom.edge_faces(u, v)
    f = [g for g in _faces_at(v) if g not in (a, b)][0]
    col = lambda g: st.colors[dom.index[g]] if g in dom.index else None
    ca, cb, cf = col(a), col(b), col(f)
    if {ca, cb} != {BLACK, WHITE} or cf not in (BLACK, WHITE):
        raise StateError(f"faces at tip {v} are not black, white and coloured")
    moves = []
    for g in (a, b):
        if col(g) != cf:
            w = (set(_corners(g)) & set(_corners(f))) - {v}
            moves.extend(w)
    if len(moves) != 1:
        raise StateError(f"separating edge at {v} is not unique")
    path.append(moves[0])


def step(st: ExplorerState, rng, audit: bool = False) -> ExplorerState:
    """One exploration step, mutating and returning ``st``.

    If the tip's third face is uncoloured it is coloured black with
    probability (1 + H(f))/2, its negative the opposite colour; both tips
    then advance along the unique black/white edge.  An already coloured
    third face is passed without a coin.

    With ``audit`` the incremental solution is checked against a fresh CG
    solve and the antisymmetry H(-g) = -H(g) is asserted.
    """
    if st.finished:
        raise StateError("exploration already finished")
    dom = st.domain
    a, b, f = _next_face(st)
    if f not in dom.index:
        raise StateError(f"tip face {f} lies outside the domain")
    i = dom.index[f]
    j = dom.negation[i]
    entry = {"step": st.n, "face": list(f), "coin": None, "H": None}
    if st.colors[i] == UNCOLORED:
        h = float(st.H[i])
        if abs(h + st.H[j]) > 1e-8:
            raise StateError("H(f-) != -H(f+) before the coin")
        u = rng.random()
        c = BLACK if u < (1.0 + h) / 2.0 else WHITE
        st.colors[i] = c
        st.colors[j] = -c
        st._green.fix([i, j], [float(c), float(-c)])
        st.H = st._green.H
        entry.update(coin=int(c), H=h)
    _advance(st, st.alpha_plus)
    _advance(st, st.alpha_minus)
    vp, vm = st.alpha_plus[-1], st.alpha_minus[-1]
    if vm != (-vp[0], -vp[1]):
        raise StateError("tips lost antisymmetry")
    st.n += 1
    st.log.append(entry)
    hit_p, hit_m = dom.on_inner_boundary(vp), dom.on_inner_boundary(vm)
    if hit_p != hit_m:
        raise StateError("tips reached the inner boundary at different times")
    st.finished = hit_p
    if audit:
        ref = solve_harmonic(dom, st.colors, st.mode, x0=st.H)
        if np.max(np.abs(ref - st.H)) > 1e-8:
            raise StateError("incremental solution drifted from the direct solve")
        if np.max(np.abs(ref[dom.negation] + ref)) > 1e-8:
            raise StateError("H is not antisymmetric")
    return st


def run(dom: HexDomain, rng, mode: str = "dirichlet0", horizon: int | None = None,
        audit: bool = False) -> ExplorerState:
    """Explore until the tips reach the inner boundary or ``horizon`` steps."""
    st = initial_state(dom, mode)
    while not st.finished and (horizon is None or st.n < horizon):
        step(st, rng, audit)
    return st


def martingale_drift(dom: HexDomain, f0, n_runs: int, horizon: int | None = None, seed: int = 0,
                     mode: str = "dirichlet0"):
    """Monte Carlo estimate of E[H_end(f0) - H_0(f0)] and its standard error.

    ``horizon=None`` runs every exploration to completion.
    """
    i0 = dom.index[tuple(f0)] if not isinstance(f0, (int, np.integer)) else int(f0)
    if dom.labels[i0] != UNCOLORED:
        raise DomainError("f0 must be uncoloured at time 0")
    if horizon == 0:
        return 0.0, 0.0
    h0 = initial_state(dom, mode).H[i0]
    diffs = np.empty(n_runs)
    for k in range(n_runs):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        st = run(dom, rng, mode, horizon)
        diffs[k] = st.H[i0] - h0
    se = diffs.std(ddof=1) / math.sqrt(n_runs) if n_runs > 1 else float("nan")
    return float(diffs.mean()), float(se)


def write_log(st: ExplorerState, path):
    with open(path, "w") as fh:
        for e in st.log:
            fh.write(json.dumps(e) + "\n")


def write_paths(st: ExplorerState, path):
    with open(path, "w") as fh:
        fh.write("k,x_plus,y_plus,x_minus,y_minus\n")
        for k, (a, b) in enumerate(zip(st.alpha_plus, st.alpha_minus)):
            xa, ya = vertex_xy(a)
            xb, yb = vertex_xy(b)
            fh.write(f"{k},{xa!r},{ya!r},{xb!r},{yb!r}\n")
