"""Packed-matrix algebra over slot-engine ciphertexts.

An h x h matrix is flattened row-major into h*h consecutive slots (entry (i,j)
at slot h*i+j); beta matrices can be interleaved at stride beta (entry (i,j) of
matrix k at slot beta*(h*i+j)+k).  Matrix products, transposes and rectangular
products are then compositions of masked rotations: a linear map U applied to
a packed vector m is

    U . m  =  sum_k  u_k  (.)  R(m, k)

where u_k is the k-th generalized diagonal of U and R is cyclic slot rotation.
The maps needed for multiplication are sparse in the diagonal basis, which is
what brings the rotation count of a full matrix product down to 3h + 5*sqrt(h)
instead of the O(h^2)..O(h^3) of generic approaches.

Row-aligning maps wrap around the h^2-slot window, so the product routines
require the matrix image to fill the ciphertext exactly (slot_count ==
beta * h^2).  Maps that never read across the window edge (row-diagonal
alignment, column shifts, transpose) work with any capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .engine import (CapacityError, CryptoContext, LevelExhaustedError,
                     Plaintext, SlotVector)

PERMUTATION_KINDS = ("sigma_mu", "tau_zeta", "col_shift", "row_shift", "transpose")

# Kinds whose diagonal decomposition reads across the h^2 window edge and
# therefore needs the packed image to wrap exactly at the slot boundary.
_WRAPPING_KINDS = ("tau_zeta", "row_shift")


@dataclass(frozen=True)
class PermutationSpec:
    """Diagonal decomposition of one matrix permutation.

    ``diagonals`` maps a signed rotation offset to its 0/1 mask over the
    h*h-slot window; only nonzero masks are stored.
    """

    kind: str
    dim_h: int
    shift: int | None
    diagonals: dict

    @property
    def wraps_window(self) -> bool:
        return self.kind in _WRAPPING_KINDS

    def mask(self, offset: int) -> np.ndarray:
        """Mask for ``offset``, an all-zero window if the diagonal is empty."""
        got = self.diagonals.get(offset)
        if got is None:
            return np.zeros(self.dim_h * self.dim_h)
        return got


def _sigma_masks(h: int) -> dict:
    n = h * h
    t = np.arange(n)
    out = {}
    for k in range(-(h - 1), h):
        if k >= 0:
            mask = (0 <= t - h * k) & (t - h * k < h - k)
        else:
            mask = (-k <= t - (h + k) * h) & (t - (h + k) * h < h)
        out[k] = mask.astype(np.float64)
    return out


def _tau_masks(h: int) -> dict:
    n = h * h
    t = np.arange(n)
    return {h * k: (t % h == k).astype(np.float64) for k in range(h)}


def _col_shift_masks(h: int, k: int) -> dict:
    t = np.arange(h * h)
    out = {k: ((t % h) < h - k).astype(np.float64)}
    low = ((t % h) >= h - k).astype(np.float64)
    if low.any():
        out[k - h] = low
    return out


def _row_shift_masks(h: int, k: int) -> dict:
    return {h * k: np.ones(h * h)}


def _transpose_masks(h: int) -> dict:
    # Diagonal (h-1)*i selects the entries whose column exceeds the row by i.
    # For i < 0 the member slots satisfy t + h*i = (h+1)*j with 0 <= j < h+i.
    n = h * h
    t = np.arange(n)
    out = {}
    for i in range(-(h - 1), h):
        if i >= 0:
            rem = t - i
            j = rem // (h + 1)
            mask = (rem >= 0) & (rem % (h + 1) == 0) & (j < h - i)
        else:
            rem = t + h * i
            j = rem // (h + 1)
            mask = (rem >= 0) & (rem % (h + 1) == 0) & (j < h + i)
        out[(h - 1) * i] = mask.astype(np.float64)
    return out


@lru_cache(maxsize=None)
def build_permutation(kind: str, h: int, k: int | None = None) -> PermutationSpec:
    """Build the diagonal masks of one of the five packed-matrix permutations.

    ``sigma_mu`` aligns each row of the left factor on its own diagonal
    (2h-1 nonzero diagonals), ``tau_zeta`` does the column analogue for the
    right factor (h diagonals), ``col_shift(k)``/``row_shift(k)`` are cyclic
    intra-row / block-row shifts (2 resp. 1 diagonals), and ``transpose``
    realizes the transpose map (2h-1 diagonals).
    """
    if kind not in PERMUTATION_KINDS:
        raise ValueError(f"unknown permutation kind {kind!r}")
    if h < 2:
        raise ValueError(f"matrix side must be >= 2, got {h}")
    if kind in ("col_shift", "row_shift"):
        if k is None or not 1 <= k < h:
            raise ValueError(f"{kind} requires a shift 1 <= k < h, got {k}")
    elif k is not None:
        raise ValueError(f"{kind} takes no shift parameter")

    if kind == "sigma_mu":
        diags = _sigma_masks(h)
    elif kind == "tau_zeta":
        diags = _tau_masks(h)
    elif kind == "col_shift":
        diags = _col_shift_masks(h, k)
    elif kind == "row_shift":
        diags = _row_shift_masks(h, k)
    else:
        diags = _transpose_masks(h)
    for m in diags.values():
        m.setflags(write=False)
    return PermutationSpec(kind, h, k, diags)


def apply_permutation(spec: PermutationSpec, vec) -> np.ndarray:
    """Plain-level reference: evaluate the masked-rotation sum on a window.

    Operates on the bare h*h window with cyclic index arithmetic, independent
    of any ciphertext ring, so it serves as the oracle for the homomorphic
    paths and runs symbolic cases at any h, power of two or not.
    """
    arr = np.asarray(vec, dtype=np.float64).ravel()
    n = spec.dim_h * spec.dim_h
    if arr.size != n:
        raise ValueError(f"expected a {n}-slot window, got {arr.size}")
    out = np.zeros(n)
    for offset, mask in spec.diagonals.items():
        out += mask * np.roll(arr, -offset)
    return out


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class PackedMatrix:
    """A ciphertext holding beta row-major h x h matrix images.

    ``rows_t`` is the logical row count: h for square payloads, or t (with
    t | h) when the image holds h/t stacked copies of a t x h matrix.
    """

    ct: SlotVector
    dim_h: int
    rows_t: int
    batch_beta: int = 1

    @property
    def window(self) -> int:
        return self.batch_beta * self.dim_h * self.dim_h


def _validate_dims(ctx: CryptoContext, h: int, beta: int) -> None:
    if h < 2:
        raise CapacityError(f"matrix side must be >= 2, got {h}")
    if beta < 1:
        raise CapacityError(f"batch size must be >= 1, got {beta}")
    if beta * h * h > ctx.slot_count:
        raise CapacityError(
            f"{beta} matrix images of side {h} need {beta * h * h} slots; "
            f"context offers {ctx.slot_count}")


def encode_matrix(values, ctx: CryptoContext, beta: int = 1, beta_slot: int = 0,
                  key_tag: str | None = None) -> PackedMatrix:
    """Encrypt one square matrix at batch position ``beta_slot`` (stride beta)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise CapacityError(f"expected a square matrix, got shape {arr.shape}")
    h = arr.shape[0]
    _validate_dims(ctx, h, beta)
    if not 0 <= beta_slot < beta:
        raise CapacityError(f"batch position {beta_slot} outside 0..{beta - 1}")
    window = np.zeros(beta * h * h)
    window[beta_slot::beta][: h * h] = arr.ravel()
    return PackedMatrix(ctx.encrypt(ctx.encode(window), key_tag), h, h, beta)


def pack_matrices(matrices, ctx: CryptoContext,
                  key_tag: str | None = None) -> PackedMatrix:
    """Encrypt a list of equal-sized square matrices interleaved in one ciphertext."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    beta = len(mats)
    h = mats[0].shape[0]
    for m in mats:
        if m.shape != (h, h):
            raise CapacityError("all batched matrices must share the same shape")
    _validate_dims(ctx, h, beta)
    window = np.zeros(beta * h * h)
    for slot, m in enumerate(mats):
        window[slot::beta][: h * h] = m.ravel()
    return PackedMatrix(ctx.encrypt(ctx.encode(window), key_tag), h, h, beta)


def encode_rect_matrix(values, ctx: CryptoContext, h: int | None = None,
                       key_tag: str | None = None) -> PackedMatrix:
    """Encrypt a t x h matrix as h/t vertically stacked copies (t must divide h)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise CapacityError(f"expected a 2-d matrix, got shape {arr.shape}")
    t, width = arr.shape
    h = width if h is None else h
    if width != h:
        raise CapacityError(f"row width {width} must equal the packing side {h}")
    if h % t != 0:
        raise CapacityError(f"logical row count {t} must divide the side {h}")
    _validate_dims(ctx, h, 1)
    image = np.tile(arr, (h // t, 1))
    return PackedMatrix(ctx.encrypt(ctx.encode(image.ravel()), key_tag), h, t, 1)


def decode_matrix(pm: PackedMatrix, beta_slot: int = 0, roster=None) -> np.ndarray:
    """Collectively decrypt one h x h image from a packed matrix.

    The roster defaults to the full party set of the owning context, which is
    always available inside the simulation.
    """
    ctx = _ctx_of(pm)
    if not 0 <= beta_slot < pm.batch_beta:
        raise CapacityError(f"batch position {beta_slot} outside the packing")
    roster = ctx.key_owners(pm.ct.key_tag) if roster is None else roster
    slots = ctx.decode(ctx.ddec(pm.ct, roster))
    h = pm.dim_h
    window = slots[: pm.window][beta_slot::pm.batch_beta][: h * h]
    return window.reshape(h, h)


def decode_all_matrices(pm: PackedMatrix, roster=None) -> list:
    return [decode_matrix(pm, b, roster) for b in range(pm.batch_beta)]


_contexts: dict = {}


def _ctx_of(pm_or_ct) -> CryptoContext:
    ct = pm_or_ct.ct if isinstance(pm_or_ct, PackedMatrix) else pm_or_ct
    ctx = _contexts.get(ct.context_id)
    if ctx is None:
        raise CapacityError(f"context {ct.context_id} is not registered")
    return ctx


def register_context(ctx: CryptoContext) -> CryptoContext:
    """Matrix ops resolve their context through this registry."""
    _contexts[ctx.context_id] = ctx
    return ctx


# ------------------------------------------------------------ linear transform


def _expand_mask(mask: np.ndarray, beta: int, slot_count: int) -> np.ndarray:
    full = np.zeros(slot_count)
    rep = np.repeat(mask, beta)
    full[: rep.size] = rep
    return full


def _encode_mask(ctx: CryptoContext, mask: np.ndarray, beta: int) -> Plaintext:
    return ctx.encode(_expand_mask(mask, beta, ctx.slot_count))


def _check_layout(ctx: CryptoContext, spec: PermutationSpec, beta: int) -> None:
    window = beta * spec.dim_h * spec.dim_h
    if window > ctx.slot_count:
        raise CapacityError(
            f"transform window {window} exceeds {ctx.slot_count} slots")
    if spec.wraps_window and window != ctx.slot_count:
        raise CapacityError(
            f"{spec.kind} aligns rows cyclically and needs an exact-fit "
            f"packing: window {window} != slot_count {ctx.slot_count}")


def he_lin_trans(ct: SlotVector, spec: PermutationSpec, beta: int = 1) -> SlotVector:
    """Masked-rotation evaluation of a permutation, one rotation per diagonal.

    The zero diagonal, when present, is applied without a rotation, so the
    rotation tally equals the nonzero diagonal count minus one in that case.
    No rescale is performed; the result carries scale * mask-scale.
    """
    ctx = _ctx_of(ct)
    _check_layout(ctx, spec, beta)
    acc = None
    for offset in sorted(spec.diagonals):
        pt = _encode_mask(ctx, spec.diagonals[offset], beta)
        rotated = ct if offset == 0 else ctx.rot(ct, beta * offset)
        term = ctx.mul_pt(rotated, pt)
        acc = term if acc is None else ctx.add(acc, term)
    return acc


def bsgs_split(h: int) -> tuple[int, int]:
    """Factor h = baby * giant with baby the largest divisor <= sqrt(h)."""
    baby = 1
    for d in range(1, math.isqrt(h) + 1):
        if h % d == 0:
            baby = d
    return baby, h // baby


_BSGS_UNITS = {"sigma_mu": 1, "tau_zeta": None, "transpose": None}


def he_lin_trans_bsgs(ct: SlotVector, spec: PermutationSpec,
                      beta: int = 1) -> SlotVector:
    """Baby-step/giant-step evaluation of sigma_mu, tau_zeta or transpose.

    Writing each diagonal offset as unit*(baby_count*i + j), the baby
    rotations R(ct, unit*j) are shared across all giant steps, cutting the
    rotation tally to baby + giants: 3*sqrt(h) for the signed-range kinds and
    2*sqrt(h) for tau_zeta when h is a perfect square.  Output is identical to
    ``he_lin_trans``.
    """
    if spec.kind not in ("sigma_mu", "tau_zeta", "transpose"):
        return he_lin_trans(ct, spec, beta)
    ctx = _ctx_of(ct)
    _check_layout(ctx, spec, beta)
    h = spec.dim_h
    baby, giant = bsgs_split(h)
    unit = h if spec.kind == "tau_zeta" else (h - 1 if spec.kind == "transpose" else 1)
    giants = range(0, giant) if spec.kind == "tau_zeta" else range(-giant, giant)

    baby_rots = [ctx.rot(ct, beta * unit * j) for j in range(baby)]
    acc = None
    n = ctx.slot_count
    for i in giants:
        gshift = beta * unit * baby * i
        inner = None
        for j in range(baby):
            mask = spec.mask(unit * (baby * i + j))
            # R(mask, -gshift) pre-compensates the outer giant rotation.
            pre = np.roll(_expand_mask(mask, beta, n), gshift % n)
            term = ctx.mul_pt(baby_rots[j], ctx.encode(pre))
            inner = term if inner is None else ctx.add(inner, term)
        shifted = ctx.rot(inner, gshift)
        acc = shifted if acc is None else ctx.add(acc, shifted)
    return acc


# ----------------------------------------------------------- matrix products


def _require_product_layout(a: PackedMatrix, b: PackedMatrix | None,
                            min_level: int) -> CryptoContext:
    ctx = _ctx_of(a)
    if b is not None:
        if b.ct.context_id != a.ct.context_id:
            raise CapacityError("operands live in different contexts")
        if a.dim_h != b.dim_h:
            raise CapacityError(
                f"matrix sides differ: {a.dim_h} vs {b.dim_h}")
        if a.batch_beta != b.batch_beta:
            raise CapacityError(
                f"batch sizes differ: {a.batch_beta} vs {b.batch_beta}")
    if a.window != ctx.slot_count:
        raise CapacityError(
            f"matrix products need an exact-fit packing (cyclic row shifts): "
            f"window {a.window} != slot_count {ctx.slot_count}")
    levels = a.ct.level if b is None else min(a.ct.level, b.ct.level)
    if levels < min_level:
        raise LevelExhaustedError(
            f"operation consumes {min_level} multiplicative levels; "
            f"operands are at level {levels}")
    return ctx


def he_mat_mult(a: PackedMatrix, b: PackedMatrix) -> PackedMatrix:
    """Packed product of (batched) square matrices in 3h + 2b + 3g rotations.

    For perfect-square h the rotation tally is exactly 3h + 5*sqrt(h); tallies
    for mul_pt / mul_ct are 4h / h.  Consumes three multiplicative levels and
    returns the result at the context's base scale.
    """
    if a.rows_t != a.dim_h or b.rows_t != b.dim_h:
        raise CapacityError("he_mat_mult expects square payloads; "
                            "use he_rect_mat_mult for stacked rectangular forms")
    ctx = _require_product_layout(a, b, 3)
    h, beta, n = a.dim_h, a.batch_beta, ctx.slot_count

    sigma = build_permutation("sigma_mu", h)
    tau = build_permutation("tau_zeta", h)
    a0 = ctx.rescale(he_lin_trans_bsgs(a.ct, sigma, beta))
    b0 = ctx.rescale(he_lin_trans_bsgs(b.ct, tau, beta))

    acc = None
    t = np.arange(h * h)
    for k in range(h):
        # Column shift via one mask: the complement half is (a0 - masked),
        # rotated the other way around the row boundary.
        pre = ((t % h) >= k).astype(np.float64)  # R(v_k, -k) in closed form
        masked = ctx.mul_pt(a0, ctx.encode(_expand_mask(pre, beta, n)))
        a_k = ctx.add(ctx.rot(masked, beta * k),
                      ctx.rot(ctx.sub(a0, masked), beta * (k - h)))
        a_k = ctx.rescale(a_k)
        b_k = ctx.rot(b0, beta * h * k)
        prod = ctx.mul_ct(a_k, b_k)
        acc = prod if acc is None else ctx.add(acc, prod)
    return PackedMatrix(ctx.rescale(acc), h, h, beta)


def he_mat_mult_batched(a: PackedMatrix, b: PackedMatrix) -> PackedMatrix:
    """Multiply beta interleaved matrix pairs with single-call tallies.

    Identical to ``he_mat_mult`` (rotation amounts are scaled by the stride
    and masks are slot-repeated), so the per-pair cost is amortized by beta.
    """
    return he_mat_mult(a, b)


def he_transpose(a: PackedMatrix) -> PackedMatrix:
    """Transpose a square packed matrix (2h-1 diagonals, bsgs rotations)."""
    if a.rows_t != a.dim_h:
        raise CapacityError("he_transpose expects a square payload")
    ctx = _ctx_of(a)
    if a.ct.level < 1:
        raise LevelExhaustedError("he_transpose consumes one multiplicative level")
    spec = build_permutation("transpose", a.dim_h)
    out = ctx.rescale(he_lin_trans_bsgs(a.ct, spec, a.batch_beta))
    return PackedMatrix(out, a.dim_h, a.dim_h, a.batch_beta)


def he_rect_mat_mult(a: PackedMatrix, b: PackedMatrix) -> PackedMatrix:
    """Product of a stacked t x h matrix with an h x h matrix.

    Only t shift stages and t ciphertext products are needed; a final
    log2(h/t) rotate-and-add fold sums the stacked partial blocks, leaving
    h/t vertical copies of the t x h product in the output image.
    """
    if a.batch_beta != 1 or b.batch_beta != 1:
        raise CapacityError("rectangular products are not batched")
    if b.rows_t != b.dim_h:
        raise CapacityError("right factor must be square")
    t = a.rows_t
    h = a.dim_h
    if h % t != 0:
        raise CapacityError(f"logical row count {t} must divide the side {h}")
    ctx = _require_product_layout(a, b, 3)

    sigma = build_permutation("sigma_mu", h)
    tau = build_permutation("tau_zeta", h)
    a0 = ctx.rescale(he_lin_trans_bsgs(a.ct, sigma))
    b0 = ctx.rescale(he_lin_trans_bsgs(b.ct, tau))

    idx = np.arange(h * h)
    acc = None
    for k in range(t):
        hi = ((idx % h) < h - k).astype(np.float64)   # v_k
        lo = ((idx % h) >= h - k).astype(np.float64)  # v_{k-h}
        a_k = ctx.add(ctx.mul_pt(ctx.rot(a0, k), ctx.encode(_pad(hi, ctx))),
                      ctx.mul_pt(ctx.rot(a0, k - h), ctx.encode(_pad(lo, ctx))))
        a_k = ctx.rescale(a_k)
        b_k = ctx.rot(b0, h * k)
        prod = ctx.mul_ct(a_k, b_k)
        acc = prod if acc is None else ctx.add(acc, prod)
    acc = ctx.rescale(acc)

    # Fold the h/t stacked partial blocks; exact-fit packing makes the
    # rotation wrap at the window edge, so every block receives the total.
    copies = h // t
    for step in range(int(math.log2(copies))):
        acc = ctx.add(acc, ctx.rot(acc, t * h * (1 << step)))
    return PackedMatrix(acc, h, t, 1)


def _pad(window_mask: np.ndarray, ctx: CryptoContext) -> np.ndarray:
    full = np.zeros(ctx.slot_count)
    full[: window_mask.size] = window_mask
    return full


def matmul_rotation_formula(h: int) -> int:
    """Measured rotation count of he_mat_mult: 3h + 2*baby + 3*giant."""
    baby, giant = bsgs_split(h)
    return 3 * h + 2 * baby + 3 * giant


def pad_matrix_pow2(values) -> np.ndarray:
    """Zero-pad a matrix to the next power-of-two square side (min 2).

    Product routines assume power-of-two sides so rotation strides stay
    aligned; callers with odd shapes pad first and un-pad after decoding.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise CapacityError(f"expected a 2-d matrix, got shape {arr.shape}")
    side = 1 << max(int(max(arr.shape)) - 1, 1).bit_length()
    out = np.zeros((side, side))
    out[: arr.shape[0], : arr.shape[1]] = arr
    return out


# ----------------------------------------------------------------- CSV interop


def matrix_to_csv(values) -> str:
    arr = np.asarray(values, dtype=np.float64)
    return "\n".join(",".join(repr(float(x)) for x in row) for row in arr) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [line.split(",") for line in text.strip().splitlines() if line.strip()]
    try:
        return np.array([[float(x) for x in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"malformed matrix CSV: {exc}") from None
