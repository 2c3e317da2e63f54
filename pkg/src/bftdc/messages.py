"""Protocol messages, decision certificates, and outcome evaluation.

All values here are immutable after construction and serialize to
canonical bytes (see codec.py / docs/wire-format.md). Certificates keep
their records sorted by participant id so that digests are insertion-order
independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Mapping

from .codec import CodecError, Reader, Writer
from .crypto import KeyDirectory, Signer, sha256

TransactionId = int
ReplicaId = int
View = int


class Outcome(Enum):
    COMMIT = 1
    ABORT = 2


class Vote(Enum):
    PREPARED = 1
    ABORTED = 2


class MessageKind(IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    PREPARE_REQUEST = 3
    VOTE = 4
    BA_PRE_PREPARE = 5
    BA_PREPARE = 6
    BA_COMMIT = 7
    VIEW_CHANGE = 8
    NEW_VIEW = 9
    DECISION = 10
    INITIATOR_COMMIT = 11
    INITIATOR_ABORT = 12
    ENDPOINT_QUERY = 13
    ENDPOINT_REPLY = 14
    # Plumbing kinds outside the commit protocol proper: transaction
    # propagation/replies between initiator and participants, and
    # retransmission of view-change messages referenced by digest.
    TX_PROPAGATE = 15
    TX_REPLY = 16
    VIEW_CHANGE_FETCH = 17
    VIEW_CHANGE_FETCH_REPLY = 18


def primary_of(view: View, f: int) -> ReplicaId:
    """Primary replica for a view: round-robin over the 3f+1 replicas."""
    if f < 0:
        raise ValueError("fault bound must be non-negative")
    return view % (3 * f + 1)


def replica_name(replica: ReplicaId) -> str:
    return f"r{replica}"


# ---------------------------------------------------------------------------
# Signed records and the decision certificate


@dataclass(frozen=True)
class RegistrationRecord:
    tid: TransactionId
    participant: str
    sig: bytes

    @staticmethod
    def signing_payload(tid: TransactionId, participant: str) -> bytes:
        return Writer().u8(0x01).u64(tid).string(participant).finish()

    @classmethod
    def create(cls, tid: TransactionId, participant: str, signer: Signer) -> "RegistrationRecord":
        return cls(tid, participant, signer.sign(cls.signing_payload(tid, participant)))

    def verify(self, directory: KeyDirectory) -> bool:
        return directory.verify(
            self.participant, self.signing_payload(self.tid, self.participant), self.sig
        )


@dataclass(frozen=True)
class VoteRecord:
    tid: TransactionId
    participant: str
    vote: Vote
    sig: bytes

    @staticmethod
    def signing_payload(tid: TransactionId, vote: Vote) -> bytes:
        # The payload binds (transaction, vote); the voter's identity is
        # bound by whose key verifies it.
        return Writer().u8(0x02).u64(tid).u8(vote.value).finish()

    @classmethod
    def create(
        cls, tid: TransactionId, participant: str, vote: Vote, signer: Signer
    ) -> "VoteRecord":
        return cls(tid, participant, vote, signer.sign(cls.signing_payload(tid, vote)))

    def verify(self, directory: KeyDirectory) -> bool:
        return directory.verify(
            self.participant, self.signing_payload(self.tid, self.vote), self.sig
        )


@dataclass(frozen=True)
class CertEntry:
    registration: RegistrationRecord
    vote: VoteRecord | None = None

    @property
    def participant(self) -> str:
        return self.registration.participant


@dataclass(frozen=True)
class DecisionCertificate:
    """Registration and vote records backing a proposed outcome.

    Entries are kept sorted by participant id; at most one registration
    and one vote per participant, and a vote only alongside a matching
    registration. Use build() to construct with invariant checks; direct
    construction is reserved for decoding wire data, which may well be
    malicious and is validated by the acceptance checks instead.
    """

    tid: TransactionId
    entries: tuple[CertEntry, ...] = ()

    @classmethod
    def build(
        cls,
        tid: TransactionId,
        registrations: Mapping[str, RegistrationRecord],
        votes: Mapping[str, VoteRecord] | None = None,
    ) -> "DecisionCertificate":
        votes = votes or {}
        unknown = set(votes) - set(registrations)
        if unknown:
            raise ValueError(f"votes without registration: {sorted(unknown)}")
        entries = []
        for pid in sorted(registrations):
            reg = registrations[pid]
            if reg.tid != tid or reg.participant != pid:
                raise ValueError(f"registration record mismatch for {pid}")
            vote = votes.get(pid)
            if vote is not None and (vote.tid != tid or vote.participant != pid):
                raise ValueError(f"vote record mismatch for {pid}")
            entries.append(CertEntry(reg, vote))
        return cls(tid, tuple(entries))

    def participants(self) -> tuple[str, ...]:
        return tuple(e.participant for e in self.entries)

    def entry_for(self, pid: str) -> CertEntry | None:
        for e in self.entries:
            if e.participant == pid:
                return e
        return None

    def vote_of(self, pid: str) -> Vote | None:
        e = self.entry_for(pid)
        return e.vote.vote if e and e.vote else None

    def summary(self) -> dict[str, str | None]:
        return {
            e.participant: (e.vote.vote.name.lower() if e.vote else None)
            for e in self.entries
        }


def evaluate_outcome(cert: DecisionCertificate) -> Outcome:
    """Commit iff every registered participant voted PREPARED.

    An empty registration set commits vacuously: a transaction that
    touched no registered participant has nothing to abort.
    """
    for entry in cert.entries:
        if entry.vote is None or entry.vote.vote is not Vote.PREPARED:
            return Outcome.ABORT
    return Outcome.COMMIT


def validate_certificate_records(
    cert: DecisionCertificate, tid: TransactionId, directory: KeyDirectory
) -> bool:
    """Structural + signature validity of every record, against tid.

    Rejects duplicate or out-of-order participants, mismatched transaction
    ids (a replayed record from an older transaction fails here), votes
    without registrations, and any record whose signature does not verify.
    """
    if cert.tid != tid:
        return False
    seen: str | None = None
    for entry in cert.entries:
        pid = entry.participant
        if seen is not None and pid <= seen:
            return False
        seen = pid
        reg = entry.registration
        if reg.tid != tid or not reg.verify(directory):
            return False
        vote = entry.vote
        if vote is not None:
            if vote.participant != pid or vote.tid != tid or not vote.verify(directory):
                return False
    return True


def validate_certificate_consistency(
    cert: DecisionCertificate,
    outcome: Outcome,
    tid: TransactionId,
    directory: KeyDirectory,
) -> bool:
    """True iff all records verify for tid and the proposed outcome
    matches what the records imply."""
    if not validate_certificate_records(cert, tid, directory):
        return False
    return evaluate_outcome(cert) is outcome


# ---------------------------------------------------------------------------
# Wire encoding of records and certificates


def _write_registration(w: Writer, reg: RegistrationRecord) -> None:
    w.u64(reg.tid).string(reg.participant).blob(reg.sig)


def _read_registration(r: Reader) -> RegistrationRecord:
    return RegistrationRecord(r.u64(), r.string(), r.blob())


def _write_vote_record(w: Writer, vote: VoteRecord) -> None:
    w.u64(vote.tid).string(vote.participant).u8(vote.vote.value).blob(vote.sig)


def _read_vote_record(r: Reader) -> VoteRecord:
    return VoteRecord(r.u64(), r.string(), _read_vote(r), r.blob())


def _read_outcome(r: Reader) -> Outcome:
    v = r.u8()
    try:
        return Outcome(v)
    except ValueError as exc:
        raise CodecError(f"invalid outcome byte: {v}") from exc


def _read_vote(r: Reader) -> Vote:
    v = r.u8()
    try:
        return Vote(v)
    except ValueError as exc:
        raise CodecError(f"invalid vote byte: {v}") from exc


def _write_certificate(w: Writer, cert: DecisionCertificate) -> None:
    w.u64(cert.tid).u32(len(cert.entries))
    for entry in cert.entries:
        _write_registration(w, entry.registration)
        w.boolean(entry.vote is not None)
        if entry.vote is not None:
            _write_vote_record(w, entry.vote)


def _read_certificate(r: Reader) -> DecisionCertificate:
    tid = r.u64()
    count = r.u32()
    entries = []
    for _ in range(count):
        reg = _read_registration(r)
        vote = _read_vote_record(r) if r.boolean() else None
        entries.append(CertEntry(reg, vote))
    return DecisionCertificate(tid, tuple(entries))


def encode_certificate(cert: DecisionCertificate) -> bytes:
    w = Writer()
    _write_certificate(w, cert)
    return w.finish()


def certificate_digest(cert: DecisionCertificate) -> bytes:
    return sha256(encode_certificate(cert))


# ---------------------------------------------------------------------------
# Signed envelope


@dataclass(frozen=True)
class SignedEnvelope:
    kind: MessageKind
    sender: str
    body: bytes
    sig: bytes

    def signing_payload(self) -> bytes:
        return bytes([self.kind.value]) + self.body


def encode_envelope(env: SignedEnvelope) -> bytes:
    return (
        Writer().u8(env.kind.value).string(env.sender).blob(env.body).blob(env.sig).finish()
    )


def decode_envelope(data: bytes) -> SignedEnvelope:
    r = Reader(data)
    env = _read_envelope(r)
    r.expect_end()
    return env


def _read_envelope(r: Reader) -> SignedEnvelope:
    kind_byte = r.u8()
    try:
        kind = MessageKind(kind_byte)
    except ValueError as exc:
        raise CodecError(f"unknown message kind: {kind_byte}") from exc
    return SignedEnvelope(kind, r.string(), r.blob(), r.blob())


def _write_envelope(w: Writer, env: SignedEnvelope) -> None:
    w.u8(env.kind.value).string(env.sender).blob(env.body).blob(env.sig)


def envelope_digest(env: SignedEnvelope) -> bytes:
    return sha256(encode_envelope(env))


class InvalidEnvelope(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


# ---------------------------------------------------------------------------
# Message bodies


@dataclass(frozen=True)
class Register:
    record: RegistrationRecord
    endpoint: str

    @property
    def tid(self) -> TransactionId:
        return self.record.tid


@dataclass(frozen=True)
class RegisterAck:
    tid: TransactionId
    replica: ReplicaId
    participant: str


@dataclass(frozen=True)
class PrepareRequest:
    tid: TransactionId
    replica: ReplicaId
    prepare_certificate: SignedEnvelope  # the initiator's signed commit request


@dataclass(frozen=True)
class VoteMsg:
    record: VoteRecord

    @property
    def tid(self) -> TransactionId:
        return self.record.tid


@dataclass(frozen=True)
class BaPrePrepare:
    view: View
    tid: TransactionId
    outcome: Outcome
    cert: DecisionCertificate


@dataclass(frozen=True)
class BaPrepare:
    view: View
    tid: TransactionId
    digest: bytes
    outcome: Outcome
    replica: ReplicaId


@dataclass(frozen=True)
class BaCommit:
    view: View
    tid: TransactionId
    digest: bytes
    outcome: Outcome
    replica: ReplicaId


@dataclass(frozen=True)
class PrePrepareTuple:
    view: View
    tid: TransactionId
    outcome: Outcome
    cert: DecisionCertificate


@dataclass(frozen=True)
class ViewChangePayload:
    """State a replica hands to the next primary.

    Exactly one of pre_prepare / fallback_cert is present: the tuple if the
    replica accepted a ba-pre-prepare, otherwise its own local certificate.
    prepared_proof, when non-empty, carries 2f matching ba-prepare
    envelopes backing the tuple.
    """

    pre_prepare: PrePrepareTuple | None = None
    prepared_proof: tuple[SignedEnvelope, ...] = ()
    fallback_cert: DecisionCertificate | None = None


@dataclass(frozen=True)
class ViewChange:
    view: View  # the view being proposed (v+1)
    tid: TransactionId
    payload: ViewChangePayload
    replica: ReplicaId


@dataclass(frozen=True)
class NewView:
    view: View
    tid: TransactionId
    outcome: Outcome
    cert: DecisionCertificate
    vc_refs: tuple[tuple[ReplicaId, bytes], ...]  # (sender, view-change digest)


@dataclass(frozen=True)
class DecisionNotification:
    tid: TransactionId
    outcome: Outcome
    replica: ReplicaId


@dataclass(frozen=True)
class InitiatorCommitRequest:
    tid: TransactionId


@dataclass(frozen=True)
class InitiatorAbortRequest:
    tid: TransactionId


@dataclass(frozen=True)
class EndpointQuery:
    tid: TransactionId
    participant: str
    replica: ReplicaId


@dataclass(frozen=True)
class EndpointReply:
    tid: TransactionId
    participant: str
    found: bool
    record: RegistrationRecord | None = None
    endpoint: str | None = None


@dataclass(frozen=True)
class TxPropagate:
    tid: TransactionId


@dataclass(frozen=True)
class TxReply:
    tid: TransactionId
    participant: str
    ok: bool


@dataclass(frozen=True)
class ViewChangeFetch:
    view: View
    tid: TransactionId
    digests: tuple[bytes, ...]
    replica: ReplicaId


@dataclass(frozen=True)
class ViewChangeFetchReply:
    view: View
    tid: TransactionId
    envelopes: tuple[SignedEnvelope, ...]


Message = (
    Register
    | RegisterAck
    | PrepareRequest
    | VoteMsg
    | BaPrePrepare
    | BaPrepare
    | BaCommit
    | ViewChange
    | NewView
    | DecisionNotification
    | InitiatorCommitRequest
    | InitiatorAbortRequest
    | EndpointQuery
    | EndpointReply
    | TxPropagate
    | TxReply
    | ViewChangeFetch
    | ViewChangeFetchReply
)

_KIND_OF: dict[type, MessageKind] = {
    Register: MessageKind.REGISTER,
    RegisterAck: MessageKind.REGISTER_ACK,
    PrepareRequest: MessageKind.PREPARE_REQUEST,
    VoteMsg: MessageKind.VOTE,
    BaPrePrepare: MessageKind.BA_PRE_PREPARE,
    BaPrepare: MessageKind.BA_PREPARE,
    BaCommit: MessageKind.BA_COMMIT,
    ViewChange: MessageKind.VIEW_CHANGE,
    NewView: MessageKind.NEW_VIEW,
    DecisionNotification: MessageKind.DECISION,
    InitiatorCommitRequest: MessageKind.INITIATOR_COMMIT,
    InitiatorAbortRequest: MessageKind.INITIATOR_ABORT,
    EndpointQuery: MessageKind.ENDPOINT_QUERY,
    EndpointReply: MessageKind.ENDPOINT_REPLY,
    TxPropagate: MessageKind.TX_PROPAGATE,
    TxReply: MessageKind.TX_REPLY,
    ViewChangeFetch: MessageKind.VIEW_CHANGE_FETCH,
    ViewChangeFetchReply: MessageKind.VIEW_CHANGE_FETCH_REPLY,
}


def kind_of(msg: Message) -> MessageKind:
    return _KIND_OF[type(msg)]


def encode_message(msg: Message) -> bytes:
    w = Writer()
    if isinstance(msg, Register):
        _write_registration(w, msg.record)
        w.string(msg.endpoint)
    elif isinstance(msg, RegisterAck):
        w.u64(msg.tid).u64(msg.replica).string(msg.participant)
    elif isinstance(msg, PrepareRequest):
        w.u64(msg.tid).u64(msg.replica)
        _write_envelope(w, msg.prepare_certificate)
    elif isinstance(msg, VoteMsg):
        _write_vote_record(w, msg.record)
    elif isinstance(msg, BaPrePrepare):
        w.u64(msg.view).u64(msg.tid).u8(msg.outcome.value)
        _write_certificate(w, msg.cert)
    elif isinstance(msg, (BaPrepare, BaCommit)):
        w.u64(msg.view).u64(msg.tid).blob(msg.digest).u8(msg.outcome.value).u64(msg.replica)
    elif isinstance(msg, ViewChange):
        w.u64(msg.view).u64(msg.tid)
        p = msg.payload
        w.boolean(p.pre_prepare is not None)
        if p.pre_prepare is not None:
            t = p.pre_prepare
            w.u64(t.view).u64(t.tid).u8(t.outcome.value)
            _write_certificate(w, t.cert)
        w.u32(len(p.prepared_proof))
        for env in p.prepared_proof:
            _write_envelope(w, env)
        w.boolean(p.fallback_cert is not None)
        if p.fallback_cert is not None:
            _write_certificate(w, p.fallback_cert)
        w.u64(msg.replica)
    elif isinstance(msg, NewView):
        w.u64(msg.view).u64(msg.tid).u8(msg.outcome.value)
        _write_certificate(w, msg.cert)
        w.u32(len(msg.vc_refs))
        for replica, digest in msg.vc_refs:
            w.u64(replica).blob(digest)
    elif isinstance(msg, DecisionNotification):
        w.u64(msg.tid).u8(msg.outcome.value).u64(msg.replica)
    elif isinstance(msg, (InitiatorCommitRequest, InitiatorAbortRequest, TxPropagate)):
        w.u64(msg.tid)
    elif isinstance(msg, EndpointQuery):
        w.u64(msg.tid).string(msg.participant).u64(msg.replica)
    elif isinstance(msg, EndpointReply):
        w.u64(msg.tid).string(msg.participant).boolean(msg.found)
        w.boolean(msg.record is not None)
        if msg.record is not None:
            _write_registration(w, msg.record)
        w.boolean(msg.endpoint is not None)
        if msg.endpoint is not None:
            w.string(msg.endpoint)
    elif isinstance(msg, TxReply):
        w.u64(msg.tid).string(msg.participant).boolean(msg.ok)
    elif isinstance(msg, ViewChangeFetch):
        w.u64(msg.view).u64(msg.tid).u32(len(msg.digests))
        for d in msg.digests:
            w.blob(d)
        w.u64(msg.replica)
    elif isinstance(msg, ViewChangeFetchReply):
        w.u64(msg.view).u64(msg.tid).u32(len(msg.envelopes))
        for env in msg.envelopes:
            _write_envelope(w, env)
    else:  # pragma: no cover - exhaustive over Message
        raise CodecError(f"cannot encode {type(msg).__name__}")
    return w.finish()


def decode_message(kind: MessageKind, body: bytes) -> Message:
    r = Reader(body)
    msg = _decode(kind, r)
    r.expect_end()
    return msg


def _decode(kind: MessageKind, r: Reader) -> Message:
    if kind is MessageKind.REGISTER:
        return Register(_read_registration(r), r.string())
    if kind is MessageKind.REGISTER_ACK:
        return RegisterAck(r.u64(), r.u64(), r.string())
    if kind is MessageKind.PREPARE_REQUEST:
        return PrepareRequest(r.u64(), r.u64(), _read_envelope(r))
    if kind is MessageKind.VOTE:
        return VoteMsg(_read_vote_record(r))
    if kind is MessageKind.BA_PRE_PREPARE:
        return BaPrePrepare(r.u64(), r.u64(), _read_outcome(r), _read_certificate(r))
    if kind in (MessageKind.BA_PREPARE, MessageKind.BA_COMMIT):
        cls = BaPrepare if kind is MessageKind.BA_PREPARE else BaCommit
        return cls(r.u64(), r.u64(), r.blob(), _read_outcome(r), r.u64())
    if kind is MessageKind.VIEW_CHANGE:
        view, tid = r.u64(), r.u64()
        pre = None
        if r.boolean():
            pre = PrePrepareTuple(r.u64(), r.u64(), _read_outcome(r), _read_certificate(r))
        proof = tuple(_read_envelope(r) for _ in range(r.u32()))
        fallback = _read_certificate(r) if r.boolean() else None
        return ViewChange(view, tid, ViewChangePayload(pre, proof, fallback), r.u64())
    if kind is MessageKind.NEW_VIEW:
        view, tid, outcome = r.u64(), r.u64(), _read_outcome(r)
        cert = _read_certificate(r)
        refs = tuple((r.u64(), r.blob()) for _ in range(r.u32()))
        return NewView(view, tid, outcome, cert, refs)
    if kind is MessageKind.DECISION:
        return DecisionNotification(r.u64(), _read_outcome(r), r.u64())
    if kind is MessageKind.INITIATOR_COMMIT:
        return InitiatorCommitRequest(r.u64())
    if kind is MessageKind.INITIATOR_ABORT:
        return InitiatorAbortRequest(r.u64())
    if kind is MessageKind.ENDPOINT_QUERY:
        return EndpointQuery(r.u64(), r.string(), r.u64())
    if kind is MessageKind.ENDPOINT_REPLY:
        tid, pid, found = r.u64(), r.string(), r.boolean()
        record = _read_registration(r) if r.boolean() else None
        endpoint = r.string() if r.boolean() else None
        return EndpointReply(tid, pid, found, record, endpoint)
    if kind is MessageKind.TX_PROPAGATE:
        return TxPropagate(r.u64())
    if kind is MessageKind.TX_REPLY:
        return TxReply(r.u64(), r.string(), r.boolean())
    if kind is MessageKind.VIEW_CHANGE_FETCH:
        view, tid = r.u64(), r.u64()
        digests = tuple(r.blob() for _ in range(r.u32()))
        return ViewChangeFetch(view, tid, digests, r.u64())
    if kind is MessageKind.VIEW_CHANGE_FETCH_REPLY:
        view, tid = r.u64(), r.u64()
        envs = tuple(_read_envelope(r) for _ in range(r.u32()))
        return ViewChangeFetchReply(view, tid, envs)
    raise CodecError(f"cannot decode kind {kind}")  # pragma: no cover


def seal(signer: Signer, sender: str, msg: Message) -> SignedEnvelope:
    """Encode and sign a message: the signature covers (kind, body)."""
    kind = kind_of(msg)
    body = encode_message(msg)
    sig = signer.sign(bytes([kind.value]) + body)
    return SignedEnvelope(kind, sender, body, sig)


def open_envelope(directory: KeyDirectory, env: SignedEnvelope) -> Message:
    """Verify the envelope signature and decode the body.

    Raises InvalidEnvelope on a bad signature or malformed body; the
    caller decides how to log the rejection.
    """
    if not directory.verify(env.sender, env.signing_payload(), env.sig):
        raise InvalidEnvelope("bad signature")
    try:
        return decode_message(env.kind, env.body)
    except CodecError as exc:
        raise InvalidEnvelope(f"malformed body: {exc}") from exc
