"""N-party encrypted federated training over the packed-matrix engine.

One global round works on ciphertexts end to end: the server broadcasts the
encrypted model, every party runs an encrypted forward/backward pass over one
mini-batch of its local shard (rectangular packed products for the batch,
transpose + square products for the gradients, composite-polynomial gates for
the activations), the server sums the encrypted per-party gradients and
applies the update  w <- w - eta/(batch*N) * grad  under encryption.  After
the last round the model is collectively re-keyed to the server's key and
decrypted there; parties never see a server-keyed ciphertext.

Level maintenance follows a fixed schedule: a rescale after every ciphertext
product (relaxable via ``rescale_every_r``) and a collective refresh after
each activation plus wherever a product chain would exhaust the budget.
Mid-training refreshes travel the wire as BOOTSTRAP_REQ/BOOTSTRAP_SHARE
frames, so both transports account the same bytes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .. import matrix
from ..approx import (CompositePolySpec, app_sign, make_local_bootstrapper,
                      polyval_ct, smooth_fit)
from ..engine import (CryptoContext, EngineError, MissingPartyError,
                      new_context)
from ..matrix import PackedMatrix, he_mat_mult, he_rect_mat_mult, he_transpose
from .config import TrainingConfig, next_pow2, one_hot
from .mirror import PlainActivation, PlainPipeline, accuracy_with_weights
from .transport import (TransportError, open_in_process_links,
                        open_tcp_links)
from .wire import SERVER_ID, MsgType, decode_ciphertext, decode_frame, \
    encode_ciphertext, encode_frame

DEFAULT_TIMEOUT = 300.0


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class PadPlan:
    """Padded packing geometry shared by every participant."""

    features: int
    classes: int
    neurons: tuple
    h: int                  # padded square side
    t: int                  # padded batch rows, t | h
    col_masks: tuple        # per layer, (h,) 0/1 row masking logical columns
    rowcol_mask: np.ndarray  # (t, h) mask of real samples x label columns

    @property
    def ring_dim(self) -> int:
        return 2 * self.h * self.h


def build_plan(config: TrainingConfig, feature_dim: int) -> PadPlan:
    classes = config.neurons[-1]
    h = next_pow2(max(feature_dim, max(config.neurons), config.batch_size, 2))
    t = min(next_pow2(config.batch_size), h)
    col_masks = []
    for n in config.neurons:
        mask = np.zeros(h)
        mask[:n] = 1.0
        col_masks.append(mask)
    rowcol = np.zeros((t, h))
    rowcol[: config.batch_size, :classes] = 1.0
    return PadPlan(feature_dim, classes, config.neurons, h, t,
                   tuple(col_masks), rowcol)


@dataclass
class ModelState:
    """Encrypted model weights plus the round counter."""

    weights: list           # per-layer PackedMatrix under the collective key
    iteration: int
    plan: PadPlan

    def clone(self) -> "ModelState":
        return ModelState(list(self.weights), self.iteration, self.plan)


@dataclass
class GradientMsg:
    """One party's encrypted per-layer gradient sums for one round."""

    party_id: int
    iteration: int
    grads: list             # per-layer PackedMatrix

    def validate(self, config: TrainingConfig, key_tag: str) -> None:
        if len(self.grads) != config.layers:
            raise ProtocolError(
                f"party {self.party_id} sent {len(self.grads)} gradient layers, "
                f"expected {config.layers}")
        for g in self.grads:
            if g.ct.key_tag != key_tag:
                raise ProtocolError("gradient ciphertext under the wrong key")


@dataclass
class ServerState:
    ctx: CryptoContext
    config: TrainingConfig
    plan: PadPlan
    model: ModelState
    logical_dims: list      # (rows, cols) per layer before padding
    finalized: bool = False


@dataclass
class PartyState:
    party_id: int
    ctx: CryptoContext
    config: TrainingConfig
    plan: PadPlan
    model: ModelState
    shard: tuple | None = None       # (features, labels)
    schedule: list | None = None     # per-round row indices for this party


@dataclass
class ForwardTrace:
    """Encrypted activations and derivative gates kept for backpropagation."""

    x_ct: PackedMatrix
    activations: list       # M_1 .. M_L (rectangular packed)
    gates: list              # per layer, PackedMatrix or None
    rows: int


def init_weights(config: TrainingConfig, feature_dim: int):
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) logical weight matrices."""
    rng = np.random.default_rng(config.seed)
    dims = []
    mats = []
    fan_in = feature_dim
    for n in config.neurons:
        bound = 1.0 / np.sqrt(fan_in)
        mats.append(rng.uniform(-bound, bound, size=(fan_in, n)))
        dims.append((fan_in, n))
        fan_in = n
    return mats, dims


def pad_square(mat: np.ndarray, h: int) -> np.ndarray:
    out = np.zeros((h, h))
    out[: mat.shape[0], : mat.shape[1]] = mat
    return out


def prepare(config: TrainingConfig, feature_dim: int, party_ids=None):
    """Key ceremony and model initialization.

    Creates the shared context (collective key owned by the N parties, a
    separate server key), encrypts the seeded initial weights, and hands every
    party an identical model copy.
    """
    if party_ids is not None:
        party_ids = list(party_ids)
        if len(party_ids) != len(set(party_ids)):
            raise ProtocolError(f"duplicate party ids: {party_ids}")
        if len(party_ids) != config.party_count:
            raise ProtocolError("party id list does not match party_count")
    plan = build_plan(config, feature_dim)
    ctx = new_context(plan.ring_dim, config.initial_level,
                      2.0 ** config.scale_bits, config.party_count)
    matrix.register_context(ctx)
    logical, dims = init_weights(config, feature_dim)
    weights = [matrix.encode_matrix(pad_square(w, plan.h), ctx) for w in logical]
    model = ModelState(weights, 0, plan)
    server = ServerState(ctx, config, plan, model, dims)
    parties = [PartyState(p, ctx, config, plan, model.clone())
               for p in range(config.party_count)]
    return server, parties


# ------------------------------------------------------------ ciphertext math


class _Compute:
    """Per-party ciphertext helpers: rescale policy and level maintenance."""

    def __init__(self, ctx: CryptoContext, config: TrainingConfig, bootstrap):
        self.ctx = ctx
        self.bootstrap = bootstrap
        self.scale_cap = ctx.initial_scale ** config.rescale_every_r

    def rs(self, ct):
        # Rescale once the scale exceeds Delta**r (r = 1 is after-every-product).
        while ct.scale > self.scale_cap and ct.level >= 1:
            ct = self.ctx.rescale(ct)
        return ct

    def lvl(self, ct, need: int):
        if ct.level >= need:
            return ct
        if self.bootstrap is None:
            raise EngineError(
                f"level exhausted: {ct.level} < {need} and no refresh path; "
                f"the bootstrap schedule is mis-placed")
        return self.bootstrap(ct)

    def mul(self, a, b):
        return self.rs(self.ctx.mul_ct(self.lvl(a, 2), self.lvl(b, 2)))

    def mul_const(self, ct, value):
        arr = np.full(self.ctx.slot_count, float(value)) if np.ndim(value) == 0 \
            else np.asarray(value, dtype=np.float64)
        return self.rs(self.ctx.mul_pt(self.lvl(ct, 2), self.ctx.encode(arr)))

    def window_mask(self, window_mask: np.ndarray):
        full = np.zeros(self.ctx.slot_count)
        full[: window_mask.size] = window_mask
        return full


class CipherActivation:
    """Ciphertext twin of mirror.PlainActivation."""

    def __init__(self, config: TrainingConfig):
        act = config.activation
        self.act = act
        if act.kind == "approx_relu":
            self.spec = CompositePolySpec.for_closeness(act.d, act.sigma, act.delta)
        elif act.kind == "approx_sigmoid":
            r = act.input_range
            self.fit = smooth_fit("sigmoid", act.degree, (-r, r))
            d = np.polynomial.polynomial.polyder(np.array(self.fit.coeffs))
            self.deriv_coeffs = tuple(d)

    def __call__(self, comp: _Compute, e):
        ctx = comp.ctx
        if self.act.kind == "identity":
            return e, None
        if self.act.kind == "approx_relu":
            scaled = comp.mul_const(e, 1.0 / self.act.input_range)
            s = app_sign(scaled, self.spec, ctx, comp.bootstrap)
            prod = comp.mul(e, s)
            m = comp.mul_const(ctx.add(e, prod), 0.5)
            gate = comp.mul_const(
                ctx.add(s, ctx.constant(1.0, s.key_tag)), 0.5)
            return m, gate
        m = polyval_ct(e, self.fit.coeffs, ctx, comp.bootstrap)
        gate = polyval_ct(e, self.deriv_coeffs, ctx, comp.bootstrap)
        return m, gate


def _as_square(pm: PackedMatrix) -> PackedMatrix:
    return PackedMatrix(pm.ct, pm.dim_h, pm.dim_h, pm.batch_beta)


def _as_rect(pm: PackedMatrix, t: int) -> PackedMatrix:
    return PackedMatrix(pm.ct, pm.dim_h, t, pm.batch_beta)


def _ensure_pm(comp: _Compute, pm: PackedMatrix, need: int) -> PackedMatrix:
    ct = comp.lvl(pm.ct, need)
    return PackedMatrix(ct, pm.dim_h, pm.rows_t, pm.batch_beta) \
        if ct is not pm.ct else pm


def local_forward(party: PartyState, batch_x: np.ndarray,
                  bootstrap=None) -> ForwardTrace:
    """Encrypted feedforward over one mini-batch.

    The batch is packed as a replicated rectangular matrix (padded rows t,
    side h); each layer is one rectangular product, the activation gate, a
    column mask confining values to the logical neurons, and a collective
    refresh.  ``bootstrap`` defaults to the in-engine collective refresh; the
    wire runtimes substitute the framed request/share exchange.
    """
    ctx, plan, config = party.ctx, party.plan, party.config
    if bootstrap is None:
        bootstrap = make_local_bootstrapper(ctx)
    comp = _Compute(ctx, config, bootstrap)
    activation = CipherActivation(config)

    rows = len(batch_x)
    if rows > config.batch_size:
        raise ProtocolError(f"batch of {rows} rows exceeds batch_size "
                            f"{config.batch_size}")
    xb = np.zeros((plan.t, plan.h))
    xb[:rows, : plan.features] = batch_x
    x_ct = matrix.encode_rect_matrix(xb, ctx)

    acts = []
    gates = []
    current = x_ct
    for j, w in enumerate(party.model.weights):
        lhs = _ensure_pm(comp, _as_rect(current, plan.t), 3)
        rhs = _ensure_pm(comp, w, 3)
        e = he_rect_mat_mult(lhs, rhs)
        m_ct, gate_ct = activation(comp, e.ct)
        m_ct = comp.mul_const(m_ct, comp.window_mask(
            np.tile(plan.col_masks[j], plan.h)))
        if bootstrap is not None:
            m_ct = bootstrap(m_ct)
        m = PackedMatrix(m_ct, plan.h, plan.t, 1)
        acts.append(m)
        gates.append(None if gate_ct is None
                     else PackedMatrix(gate_ct, plan.h, plan.t, 1))
        current = m
    return ForwardTrace(x_ct, acts, gates, rows)


def local_backward(party: PartyState, trace: ForwardTrace,
                   batch_labels: np.ndarray, bootstrap=None) -> GradientMsg:
    """Encrypted backpropagation; returns per-layer gradient sums.

    Gradients are computed as (t/h) * square-product of the transposed
    replicated activation image with the replicated error image, which equals
    the plain block product summed over the batch rows.
    """
    ctx, plan, config = party.ctx, party.plan, party.config
    if bootstrap is None:
        bootstrap = make_local_bootstrapper(ctx)
    comp = _Compute(ctx, config, bootstrap)

    yb = np.zeros((plan.t, plan.h))
    yb[: len(batch_labels), : plan.classes] = one_hot(batch_labels, plan.classes)
    y_ct = matrix.encode_rect_matrix(yb, ctx)

    m_last = trace.activations[-1]
    if config.fig5_squared_loss:
        err = ctx.sub(comp.lvl(y_ct.ct, 2), comp.lvl(m_last.ct, 2))
        delta = comp.mul(err, err)
    else:
        delta = comp.mul_const(
            ctx.sub(comp.lvl(m_last.ct, 2), comp.lvl(y_ct.ct, 2)), 2.0)
    if trace.gates[-1] is not None:
        delta = comp.mul(delta, trace.gates[-1].ct)
    delta = comp.mul_const(delta, comp.window_mask(
        np.tile(plan.rowcol_mask, (plan.h // plan.t, 1)).ravel()))

    weights = party.model.weights
    below = [trace.x_ct] + trace.activations[:-1]
    grads: list = [None] * len(weights)
    scale = plan.t / plan.h
    for j in reversed(range(len(weights))):
        m_prev = _ensure_pm(comp, _as_square(below[j]), 2)
        m_t = he_transpose(m_prev)
        g = he_mat_mult(_ensure_pm(comp, m_t, 3),
                        _ensure_pm(comp, _as_square(
                            PackedMatrix(delta, plan.h, plan.h, 1)), 3))
        grads[j] = PackedMatrix(comp.mul_const(g.ct, scale), plan.h, plan.h, 1)
        if j > 0:
            w_t = he_transpose(_ensure_pm(comp, weights[j], 2))
            d_pm = he_rect_mat_mult(
                _ensure_pm(comp, PackedMatrix(delta, plan.h, plan.t, 1), 3),
                _ensure_pm(comp, w_t, 3))
            delta = d_pm.ct
            if trace.gates[j - 1] is not None:
                delta = comp.mul(delta, trace.gates[j - 1].ct)
    return GradientMsg(party.party_id, party.model.iteration, grads)


def aggregate(server: ServerState, msgs: list) -> ModelState:
    """Sum the N gradient messages and apply the encrypted SGD update.

    Synchronous-round contract: exactly one message per party at the current
    iteration, otherwise the round stalls with an error.
    """
    ctx, config, plan = server.ctx, server.config, server.plan
    seen = {m.party_id for m in msgs}
    expected = set(range(config.party_count))
    if seen != expected:
        missing = sorted(expected - seen)
        raise MissingPartyError(
            f"aggregation round {server.model.iteration} is missing gradient "
            f"messages from parties {missing}")
    by_party = {m.party_id: m for m in msgs}
    for m in msgs:
        if m.iteration != server.model.iteration:
            raise ProtocolError(
                f"party {m.party_id} sent gradients for round {m.iteration}, "
                f"server is at round {server.model.iteration}")
        m.validate(config, ctx.DEFAULT_KEY)

    factor = config.learning_rate / (config.batch_size * config.party_count)
    pt_factor = ctx.encode(np.full(ctx.slot_count, factor))
    new_weights = []
    for j, w in enumerate(server.model.weights):
        total = None
        for p in range(config.party_count):
            g = by_party[p].grads[j].ct
            total = g if total is None else ctx.add(total, g)
        if total.level < 1:
            total = ctx.dbootstrap(total, ctx.parties)
        upd = ctx.rescale(ctx.mul_pt(total, pt_factor))
        new_ct = ctx.sub(w.ct, upd)
        # Refresh so the next round's products have their full budget.
        new_ct = ctx.dbootstrap(new_ct, ctx.parties)
        new_weights.append(PackedMatrix(new_ct, plan.h, plan.h, 1))
    server.model = ModelState(new_weights, server.model.iteration + 1, plan)
    return server.model


def finalize(server: ServerState, roster=None):
    """Re-key every weight to the server key and decrypt, unpadding layers."""
    ctx, config = server.ctx, server.config
    if server.model.iteration < config.global_iters:
        raise ProtocolError(
            f"finalize before round {config.global_iters}: model is at "
            f"iteration {server.model.iteration}")
    roster = ctx.parties if roster is None else tuple(roster)
    out = []
    for w, (rows, cols) in zip(server.model.weights, server.logical_dims):
        switched = ctx.dkey_switch(w.ct, ctx.SERVER_KEY, roster)
        slots = ctx.decode(ctx.ddec(switched, ("server",)))
        img = slots[: server.plan.h * server.plan.h].reshape(
            server.plan.h, server.plan.h)
        out.append(img[:rows, :cols].copy())
    server.finalized = True
    return out


def decode_model(server: ServerState) -> list:
    """Instrumentation: decode the padded encrypted weights (full roster)."""
    ctx = server.ctx
    h = server.plan.h
    out = []
    for w in server.model.weights:
        slots = ctx.decode(ctx.ddec(w.ct, ctx.parties))
        out.append(slots[: h * h].reshape(h, h).copy())
    return out


# ----------------------------------------------------------------- runtimes


def build_schedule(config: TrainingConfig, shard_sizes: list) -> list:
    """Deterministic per-round, per-party mini-batch row indices."""
    streams = []
    for p, size in enumerate(shard_sizes):
        rng = np.random.default_rng([config.seed, p])
        order = rng.permutation(size)
        streams.append(order)
    schedule = []
    cursors = [0] * len(shard_sizes)
    for _ in range(config.global_iters):
        round_rows = []
        for p, size in enumerate(shard_sizes):
            take = min(config.batch_size, size)
            rows = []
            for _ in range(take):
                rows.append(streams[p][cursors[p] % size])
                cursors[p] += 1
            round_rows.append(np.array(rows, dtype=np.int64))
        schedule.append(round_rows)
    return schedule


class PartyRuntime:
    """Thread body executing one party's side of the wire protocol."""

    def __init__(self, state: PartyState, link, timeout: float = DEFAULT_TIMEOUT):
        self.state = state
        self.link = link
        self.timeout = timeout
        self.error: BaseException | None = None
        self._round = 0

    def _decode_ct(self, payload):
        ct = decode_ciphertext(payload, self.state.ctx)
        # Parties must never be handed server-keyed material.
        if ct.key_tag != self.state.ctx.DEFAULT_KEY:
            raise ProtocolError(
                f"party {self.state.party_id} received a ciphertext under "
                f"key {ct.key_tag!r}")
        return ct

    def _bootstrap(self, ct):
        payload = encode_ciphertext(ct)
        self.link.send(encode_frame(MsgType.BOOTSTRAP_REQ, self._round,
                                    self.state.party_id, payload))
        frame = decode_frame(self.link.recv(self.timeout))
        if frame.msg_type != MsgType.BOOTSTRAP_SHARE:
            raise ProtocolError(
                f"expected a bootstrap share, got {frame.msg_type.name}")
        return self._decode_ct(frame.payload)

    def _run_round(self, round_no: int, weight_cts: list) -> None:
        state = self.state
        plan = state.plan
        state.model = ModelState(
            [PackedMatrix(ct, plan.h, plan.h, 1) for ct in weight_cts],
            round_no, plan)
        x, y = state.shard
        rows = state.schedule[round_no][state.party_id]
        self._round = round_no
        trace = local_forward(state, x[rows], bootstrap=self._bootstrap)
        msg = local_backward(state, trace, y[rows], bootstrap=self._bootstrap)
        for g in msg.grads:
            self.link.send(encode_frame(MsgType.GRADIENT, round_no,
                                        state.party_id, encode_ciphertext(g.ct)))

    def run(self) -> None:
        try:
            layers = self.state.config.layers
            pending: list = []
            while True:
                frame = decode_frame(self.link.recv(self.timeout))
                if frame.msg_type == MsgType.MODEL_BCAST:
                    pending.append(self._decode_ct(frame.payload))
                    if len(pending) == layers:
                        self._run_round(frame.round, pending)
                        pending = []
                elif frame.msg_type == MsgType.KEYSWITCH_REQ:
                    # The request carries the collective-key ciphertext being
                    # re-keyed; the party answers with its consent share.
                    self._decode_ct(frame.payload)
                    self.link.send(encode_frame(
                        MsgType.KEYSWITCH_SHARE, frame.round,
                        self.state.party_id))
                elif frame.msg_type == MsgType.DONE:
                    return
                else:
                    raise ProtocolError(
                        f"party {self.state.party_id} cannot handle "
                        f"{frame.msg_type.name}")
        except BaseException as exc:  # surfaced by the server loop
            self.error = exc


class ServerRuntime:
    """Server side: broadcast, collect, aggregate, finalize."""

    def __init__(self, server: ServerState, links: list,
                 timeout: float = DEFAULT_TIMEOUT):
        self.server = server
        self.links = links
        self.timeout = timeout
        self._lock = threading.Lock()
        self._arrived = threading.Condition(self._lock)
        self._gradients: dict = {}
        self._ks_acks: set = set()
        self._reader_errors: list = []
        self._readers = [threading.Thread(target=self._read_loop, args=(p,),
                                          daemon=True)
                         for p in range(len(links))]

    # ---------------------------------------------------------------- wiring

    def start(self) -> None:
        for t in self._readers:
            t.start()

    def _read_loop(self, pid: int) -> None:
        link = self.links[pid]
        try:
            while True:
                frame = decode_frame(link.server_recv(self.timeout))
                if frame.msg_type == MsgType.BOOTSTRAP_REQ:
                    ct = decode_ciphertext(frame.payload, self.server.ctx)
                    out = self.server.ctx.dbootstrap(ct, self.server.ctx.parties)
                    link.server_send(encode_frame(
                        MsgType.BOOTSTRAP_SHARE, frame.round, SERVER_ID,
                        encode_ciphertext(out)))
                elif frame.msg_type == MsgType.GRADIENT:
                    ct = decode_ciphertext(frame.payload, self.server.ctx)
                    with self._arrived:
                        self._gradients.setdefault(
                            (frame.round, frame.party_id), []).append(ct)
                        self._arrived.notify_all()
                elif frame.msg_type == MsgType.KEYSWITCH_SHARE:
                    with self._arrived:
                        self._ks_acks.add(frame.party_id)
                        self._arrived.notify_all()
                else:
                    raise ProtocolError(
                        f"server cannot handle {frame.msg_type.name}")
        except TransportError:
            return  # link closed at shutdown
        except BaseException as exc:
            with self._arrived:
                self._reader_errors.append((pid, exc))
                self._arrived.notify_all()

    def broadcast_model(self, round_no: int) -> None:
        for link in self.links:
            for w in self.server.model.weights:
                link.server_send(encode_frame(
                    MsgType.MODEL_BCAST, round_no, SERVER_ID,
                    encode_ciphertext(w.ct)))

    def _check_readers(self) -> None:
        if self._reader_errors:
            pid, exc = self._reader_errors[0]
            raise ProtocolError(f"party {pid} link failed: {exc}") from exc

    def collect_gradients(self, round_no: int, party_errors) -> list:
        config = self.server.config
        needed = {(round_no, p) for p in range(config.party_count)}
        with self._arrived:
            while True:
                self._check_readers()
                for p, err in party_errors():
                    raise ProtocolError(
                        f"party {p} failed during round {round_no}") from err
                done = all(len(self._gradients.get(key, [])) == config.layers
                           for key in needed)
                if done:
                    break
                if not self._arrived.wait(self.timeout):
                    missing = sorted(p for (r, p) in needed
                                     if len(self._gradients.get((r, p), []))
                                     < config.layers)
                    raise TransportError(
                        f"round {round_no} timed out waiting for parties "
                        f"{missing}")
            plan = self.server.plan
            msgs = []
            for p in range(config.party_count):
                cts = self._gradients.pop((round_no, p))
                msgs.append(GradientMsg(p, round_no, [
                    PackedMatrix(ct, plan.h, plan.h, 1) for ct in cts]))
            return msgs

    def finalize_over_wire(self) -> list:
        config = self.server.config
        round_no = self.server.model.iteration
        for link in self.links:
            for w in self.server.model.weights:
                link.server_send(encode_frame(
                    MsgType.KEYSWITCH_REQ, round_no, SERVER_ID,
                    encode_ciphertext(w.ct)))
        with self._arrived:
            while len(self._ks_acks) < config.party_count:
                self._check_readers()
                if not self._arrived.wait(self.timeout):
                    raise TransportError("key switch timed out")
        return finalize(self.server)

    def shutdown(self) -> None:
        for link in self.links:
            try:
                link.server_send(encode_frame(MsgType.DONE,
                                              self.server.model.iteration,
                                              SERVER_ID))
            except Exception:
                pass


@dataclass
class TrainingResult:
    final_weights: list          # logical (unpadded) numpy arrays
    metrics: dict
    ct_trajectory: list          # per-round decoded padded weights
    mirror_trajectory: list      # per-round mirror padded weights
    mirror_final: list
    exact_final_accuracy: float
    accuracy_delta: float
    context: CryptoContext


def run_training(config: TrainingConfig, party_datasets, transport: str = "in_process",
                 test_set=None, timeout: float = DEFAULT_TIMEOUT) -> TrainingResult:
    """Run the full synchronous protocol and return model, metrics, oracles.

    ``party_datasets`` is one (features, labels) pair per party.  The metrics
    report carries per-round train/test accuracy, cumulative meter snapshots
    and byte accounting; a plaintext run with ideal activations on the same
    seed supplies the accuracy-gap figure.
    """
    if len(party_datasets) != config.party_count:
        raise ProtocolError(
            f"{len(party_datasets)} datasets for {config.party_count} parties")
    shards = [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64))
              for x, y in party_datasets]
    feature_dim = shards[0][0].shape[1]
    for x, y in shards:
        if x.shape[1] != feature_dim:
            raise ProtocolError("feature dimensions differ across parties")
        if len(x) != len(y):
            raise ProtocolError("feature/label row counts differ")
        if len(x) < 1:
            raise ProtocolError("every party needs at least one sample")

    server, parties = prepare(config, feature_dim)
    plan = server.plan
    schedule = build_schedule(config, [len(x) for x, _ in shards])
    for p, state in enumerate(parties):
        state.shard = shards[p]
        state.schedule = schedule

    padded_init = decode_model(server)
    mirror = PlainPipeline(config, plan, padded_init, shards, schedule)
    exact_ref = PlainPipeline(config, plan, padded_init, shards, schedule,
                              exact_activation=True)

    train_x = np.concatenate([x for x, _ in shards])
    train_y = np.concatenate([y for _, y in shards])
    if test_set is None:
        test_x, test_y = train_x[:0], train_y[:0]
    else:
        test_x = np.asarray(test_set[0], dtype=np.float64)
        test_y = np.asarray(test_set[1], dtype=np.int64)
    poly_act = PlainActivation(config.activation)

    if transport == "in_process":
        links, acct, listener = open_in_process_links(config.party_count)
        server_links = links
        party_links = links
    elif transport == "tcp":
        server_links, party_links, acct, listener = open_tcp_links(
            config.party_count)
    else:
        raise ProtocolError(f"unknown transport {transport!r}")

    runtimes = [PartyRuntime(parties[p], party_links[p], timeout)
                for p in range(config.party_count)]
    threads = [threading.Thread(target=rt.run, daemon=True) for rt in runtimes]
    for t in threads:
        t.start()
    srv = ServerRuntime(server, server_links, timeout)
    srv.start()

    def party_errors():
        return [(p, rt.error) for p, rt in enumerate(runtimes)
                if rt.error is not None]

    rounds = []
    ct_traj = []
    mirror_traj = []
    prev_tx = prev_rx = 0
    try:
        for r in range(config.global_iters):
            srv.broadcast_model(r)
            msgs = srv.collect_gradients(r, party_errors)
            aggregate(server, msgs)
            mirror.step()
            exact_ref.step()

            decoded = decode_model(server)
            ct_traj.append(decoded)
            mirror_traj.append([w.copy() for w in mirror.weights])
            tx, rx = acct.totals()
            rounds.append({
                "round": r,
                "train_acc": accuracy_with_weights(decoded, plan, poly_act,
                                                   train_x, train_y),
                "test_acc": accuracy_with_weights(decoded, plan, poly_act,
                                                  test_x, test_y),
                "ops": server.ctx.meter.snapshot(),
                "bytes_tx": tx - prev_tx,
                "bytes_rx": rx - prev_rx,
            })
            prev_tx, prev_rx = tx, rx
        final = srv.finalize_over_wire()
    finally:
        srv.shutdown()
        for t in threads:
            t.join(timeout=10.0)
        for link in set(server_links) | set(party_links):
            link.close()
        if listener is not None:
            listener.close()
    for p, err in party_errors():
        raise ProtocolError(f"party {p} failed") from err

    eval_x, eval_y = (test_x, test_y) if len(test_x) else (train_x, train_y)
    final_acc = accuracy_with_weights(decode_model(server), plan, poly_act,
                                      eval_x, eval_y)
    exact_acc = exact_ref.accuracy(eval_x, eval_y)
    tx, rx = acct.totals()
    metrics = {
        "transport": transport,
        "parties": config.party_count,
        "rounds": rounds,
        "final": {
            "train_acc": accuracy_with_weights(decode_model(server), plan,
                                               poly_act, train_x, train_y),
            "test_acc": accuracy_with_weights(decode_model(server), plan,
                                              poly_act, test_x, test_y),
            "accuracy": final_acc,
            "exact_activation_accuracy": exact_acc,
            "accuracy_delta": abs(final_acc - exact_acc),
            "bytes_tx_total": tx,
            "bytes_rx_total": rx,
            "ops_total": server.ctx.meter.snapshot(),
        },
    }
    return TrainingResult(final, metrics, ct_traj, mirror_traj,
                          [w.copy() for w in mirror.weights],
                          exact_acc, abs(final_acc - exact_acc), server.ctx)
