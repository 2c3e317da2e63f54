"""Per-transaction Byzantine agreement among the coordinator replicas.

One AgreementInstance binds a proposed outcome to a transaction id through
three phases (ba-pre-prepare, ba-prepare, ba-commit) plus a view-change
protocol that replaces a suspected primary while preserving any outcome
already backed by a prepared quorum.

Message flow and counting conventions:

* The primary multicasts the ba-pre-prepare carrying its decision
  certificate, counts that message in lieu of a ba-prepare of its own,
  and therefore enters the prepared state as soon as it proposes.
* Backups multicast their ba-prepare to the other backups only; a backup
  is prepared on 2f matching ba-prepares from distinct replicas counting
  its own.
* Every prepared replica multicasts ba-commit to all other replicas and
  is committed on 2f+1 matching ba-commits counting its own.

Timers double per view: waiting on view v uses base * 2**v.
"""

from __future__ import annotations

from enum import Enum
from typing import Protocol

from .actions import Action, Send, StartTimer, Tracer
from .codec import CodecError
from .crypto import KeyDirectory, Signer
from .messages import (
    BaCommit,
    BaPrepare,
    BaPrePrepare,
    DecisionCertificate,
    MessageKind,
    NewView,
    Outcome,
    PrePrepareTuple,
    RegistrationRecord,
    SignedEnvelope,
    TransactionId,
    ViewChange,
    ViewChangeFetch,
    ViewChangeFetchReply,
    ViewChangePayload,
    Vote,
    VoteRecord,
    certificate_digest,
    decode_message,
    envelope_digest,
    evaluate_outcome,
    primary_of,
    replica_name,
    seal,
    validate_certificate_consistency,
    validate_certificate_records,
)


class BaStatus(Enum):
    IDLE = "idle"
    PRE_PREPARED = "ba-pre-prepared"
    PREPARED = "ba-prepared"
    COMMITTED = "ba-committed"


class AgreementHost(Protocol):
    """What the agreement instance needs from its coordinator replica."""

    name: str
    replica_id: int
    f: int
    tid: TransactionId
    signer: Signer
    directory: KeyDirectory

    def local_registrations(self) -> dict[str, RegistrationRecord]: ...
    def local_votes(self) -> dict[str, VoteRecord]: ...
    def merge_certificate_registrations(
        self, cert: DecisionCertificate, source: str
    ) -> list[Action]: ...
    def decision_reached(
        self, outcome: Outcome, cert: DecisionCertificate, now: float
    ) -> list[Action]: ...


def validate_view_change(
    msg: ViewChange, f: int, tid: TransactionId, directory: KeyDirectory
) -> tuple[bool, str]:
    """Validity of a view-change message for the view it proposes.

    The payload must carry exactly one of {pre-prepare tuple, fallback
    certificate}; any ba-pre-prepare/ba-prepare information must be for
    this transaction in a view below the proposed one, and every embedded
    signature must verify.
    """
    if msg.tid != tid:
        return False, "wrong-transaction"
    p = msg.payload
    if (p.pre_prepare is None) == (p.fallback_cert is None):
        return False, "payload-shape"
    if p.pre_prepare is not None:
        t = p.pre_prepare
        if t.tid != tid:
            return False, "tuple-transaction"
        if t.view >= msg.view:
            return False, "tuple-view-too-high"
        if not validate_certificate_consistency(t.cert, t.outcome, tid, directory):
            return False, "tuple-cert-invalid"
        if p.prepared_proof:
            if len(p.prepared_proof) != 2 * f:
                return False, "proof-size"
            digest = certificate_digest(t.cert)
            senders: set[int] = set()
            for env in p.prepared_proof:
                if env.kind is not MessageKind.BA_PREPARE:
                    return False, "proof-kind"
                if not directory.verify(env.sender, env.signing_payload(), env.sig):
                    return False, "proof-signature"
                try:
                    bp = decode_message(env.kind, env.body)
                except CodecError:
                    return False, "proof-body"
                assert isinstance(bp, BaPrepare)
                if (
                    bp.view != t.view
                    or bp.tid != tid
                    or bp.digest != digest
                    or bp.outcome is not t.outcome
                    or env.sender != replica_name(bp.replica)
                ):
                    return False, "proof-mismatch"
                senders.add(bp.replica)
            if len(senders) != 2 * f:
                return False, "proof-duplicate-sender"
    else:
        if p.prepared_proof:
            return False, "proof-without-tuple"
        if not validate_certificate_records(p.fallback_cert, tid, directory):
            return False, "fallback-cert-invalid"
    return True, "ok"


def build_new_view(
    tid: TransactionId,
    f: int,
    items: list[tuple[int, ViewChangePayload]],
    directory: KeyDirectory,
) -> tuple[Outcome, DecisionCertificate]:
    """Derive the new view's proposal from 2f+1 validated view changes.

    Rule 1: a payload carrying a prepared proof fixes the decision, unless
    another proof conflicts on the outcome (then fall through). Rule 2:
    rebuild the certificate as the union of all registration records and
    all vote records across the payloads, resolving conflicting votes from
    one participant in favor of PREPARED, and evaluate the outcome from
    the rebuilt certificate.
    """
    items = sorted(items, key=lambda it: it[0])
    proofs = [(rid, p.pre_prepare) for rid, p in items if p.prepared_proof]
    if proofs:
        outcomes = {t.outcome for _, t in proofs}
        if len(outcomes) == 1:
            _, best = max(proofs, key=lambda it: (it[1].view, -it[0]))
            return best.outcome, best.cert
    regs: dict[str, RegistrationRecord] = {}
    votes: dict[str, VoteRecord] = {}
    for _, payload in items:
        certs = []
        if payload.pre_prepare is not None:
            certs.append(payload.pre_prepare.cert)
        if payload.fallback_cert is not None:
            certs.append(payload.fallback_cert)
        for cert in certs:
            for entry in cert.entries:
                pid = entry.participant
                regs.setdefault(pid, entry.registration)
                if entry.vote is None:
                    continue
                cur = votes.get(pid)
                if cur is None or (
                    cur.vote is Vote.ABORTED and entry.vote.vote is Vote.PREPARED
                ):
                    votes[pid] = entry.vote
    votes = {pid: v for pid, v in votes.items() if pid in regs}
    cert = DecisionCertificate.build(tid, regs, votes)
    return evaluate_outcome(cert), cert


class AgreementInstance:
    def __init__(self, host: AgreementHost, tracer: Tracer, base_timeout: float) -> None:
        self.host = host
        self.tracer = tracer
        self.base_timeout = base_timeout
        self.f = host.f
        self.n = 3 * host.f + 1
        self.me = host.replica_id
        self.tid = host.tid

        self.view = 0
        self.pending_view = 0  # highest view we sent a view change for (>= view)
        self.status = BaStatus.IDLE
        self.accepted: PrePrepareTuple | None = None
        self.accepted_digest: bytes | None = None
        self.proposal: tuple[Outcome, DecisionCertificate] | None = None

        # (view, digest, outcome) -> {replica: envelope}
        self.prepare_envs: dict[tuple[int, bytes, Outcome], dict[int, SignedEnvelope]] = {}
        self.commit_senders: dict[tuple[int, bytes, Outcome], set[int]] = {}
        # view -> {replica: (digest, envelope, msg)}
        self.view_changes: dict[int, dict[int, tuple[bytes, SignedEnvelope, ViewChange]]] = {}
        self.vc_by_digest: dict[bytes, SignedEnvelope] = {}
        self.pending_new_view: tuple[SignedEnvelope, NewView, set[bytes]] | None = None

        self._own_pre_prepare: SignedEnvelope | None = None
        self._own_prepare: SignedEnvelope | None = None
        self._own_commit: SignedEnvelope | None = None
        self._own_view_change: SignedEnvelope | None = None

    # -- helpers ------------------------------------------------------------

    def _trace(self, kind: str, **detail) -> None:
        self.tracer(kind, self.host.name, detail)

    def _others(self) -> list[str]:
        return [replica_name(i) for i in range(self.n) if i != self.me]

    def _backups_except_me(self, view: int) -> list[str]:
        p = primary_of(view, self.f)
        return [replica_name(i) for i in range(self.n) if i != self.me and i != p]

    def _is_primary(self, view: int) -> bool:
        return primary_of(view, self.f) == self.me

    def _set_status(self, new: BaStatus, **detail) -> None:
        self._trace(
            "stateTransition",
            object="agreement",
            frm=self.status.value,
            to=new.value,
            view=self.view,
            tid=self.tid,
            **detail,
        )
        self.status = new

    def _arm_timer(self, view: int) -> list[Action]:
        duration = self.base_timeout * (2**view)
        self._trace("stateTransition", object="agreement", event="timer-armed",
                    frm="-", to="-", view=view, duration=duration, tid=self.tid)
        return [StartTimer(duration, f"ba:{view}")]

    def _key(self) -> tuple[int, bytes, Outcome]:
        assert self.accepted is not None and self.accepted_digest is not None
        return (self.view, self.accepted_digest, self.accepted.outcome)

    # -- lifecycle ----------------------------------------------------------

    def activate(self, now: float) -> list[Action]:
        """Arm the view-0 timer; called once when the instance is created."""
        return self._arm_timer(self.pending_view)

    def propose(self, outcome: Outcome, cert: DecisionCertificate, now: float) -> list[Action]:
        """Local prepare phase finished: primary broadcasts, backups wait."""
        if self.proposal is not None:
            return []
        self.proposal = (outcome, cert)
        if not (
            self._is_primary(self.view)
            and self.view == self.pending_view
            and self.status is BaStatus.IDLE
        ):
            return []
        self.accepted = PrePrepareTuple(self.view, self.tid, outcome, cert)
        self.accepted_digest = certificate_digest(cert)
        msg = BaPrePrepare(self.view, self.tid, outcome, cert)
        self._own_pre_prepare = seal(self.host.signer, self.host.name, msg)
        self._set_status(BaStatus.PRE_PREPARED, role="primary",
                         outcome=outcome.name.lower())
        out: list[Action] = [Send(d, self._own_pre_prepare) for d in self._others()]
        out += self._become_prepared(now)
        return out

    # -- normal-case messages -------------------------------------------------

    def on_ba_pre_prepare(self, env: SignedEnvelope, msg: BaPrePrepare, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or msg.tid != self.tid:
            return []
        if msg.view != self.view or self.pending_view != self.view:
            self._trace("drop", reason="pre-prepare-wrong-view", view=msg.view,
                        current=self.view)
            return []
        if env.sender != replica_name(primary_of(msg.view, self.f)):
            self._trace("byzantineEvidence", reason="pre-prepare-not-from-primary",
                        sender=env.sender, view=msg.view)
            return []
        if self._is_primary(self.view):
            self._trace("byzantineEvidence", reason="pre-prepare-at-primary",
                        sender=env.sender)
            return []
        digest = certificate_digest(msg.cert)
        if self.accepted is not None:
            if digest == self.accepted_digest and msg.outcome is self.accepted.outcome:
                return []  # retransmission
            self._trace("byzantineEvidence", reason="conflicting-pre-prepare",
                        sender=env.sender, view=msg.view)
            return self._suspect("conflicting-pre-prepare", now)

        local = self.host.local_registrations()
        cert_pids = set(msg.cert.participants())
        if not cert_pids >= set(local):
            self._trace("byzantineEvidence", reason="pre-prepare-missing-registrations",
                        missing=sorted(set(local) - cert_pids), sender=env.sender)
            return self._suspect("pre-prepare-missing-registrations", now)
        if not validate_certificate_consistency(msg.cert, msg.outcome, self.tid,
                                                self.host.directory):
            self._trace("byzantineEvidence", reason="pre-prepare-bad-certificate",
                        sender=env.sender)
            return self._suspect("pre-prepare-bad-certificate", now)

        out = self.host.merge_certificate_registrations(msg.cert, env.sender)
        self.accepted = PrePrepareTuple(msg.view, msg.tid, msg.outcome, msg.cert)
        self.accepted_digest = digest
        self._set_status(BaStatus.PRE_PREPARED, role="backup",
                         outcome=msg.outcome.name.lower())
        prep = BaPrepare(self.view, self.tid, digest, msg.outcome, self.me)
        self._own_prepare = seal(self.host.signer, self.host.name, prep)
        self.prepare_envs.setdefault(self._key(), {})[self.me] = self._own_prepare
        out += [Send(d, self._own_prepare) for d in self._backups_except_me(self.view)]
        out += self._reeval(now)
        return out

    def on_ba_prepare(self, env: SignedEnvelope, msg: BaPrepare, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or msg.tid != self.tid:
            return []
        if env.sender != replica_name(msg.replica):
            self._trace("byzantineEvidence", reason="replica-id-mismatch", sender=env.sender)
            return []
        if msg.view < self.view:
            self._trace("drop", reason="ba-prepare-stale-view", view=msg.view)
            return []
        key = (msg.view, msg.digest, msg.outcome)
        self.prepare_envs.setdefault(key, {}).setdefault(msg.replica, env)
        if self.accepted is not None and msg.view == self.view and key != self._key():
            self._trace("drop", reason="ba-prepare-mismatch", sender=env.sender,
                        view=msg.view)
        return self._reeval(now)

    def on_ba_commit(self, env: SignedEnvelope, msg: BaCommit, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or msg.tid != self.tid:
            return []
        if env.sender != replica_name(msg.replica):
            self._trace("byzantineEvidence", reason="replica-id-mismatch", sender=env.sender)
            return []
        if msg.view < self.view:
            self._trace("drop", reason="ba-commit-stale-view", view=msg.view)
            return []
        key = (msg.view, msg.digest, msg.outcome)
        self.commit_senders.setdefault(key, set()).add(msg.replica)
        if self.accepted is not None and msg.view == self.view and key != self._key():
            self._trace("drop", reason="ba-commit-mismatch", sender=env.sender,
                        view=msg.view)
        return self._reeval(now)

    def _reeval(self, now: float) -> list[Action]:
        if self.accepted is None or self.view != self.pending_view:
            return []
        out: list[Action] = []
        key = self._key()
        if (
            self.status is BaStatus.PRE_PREPARED
            and not self._is_primary(self.view)
            and len(self.prepare_envs.get(key, {})) >= 2 * self.f
        ):
            out += self._become_prepared(now)
        if (
            self.status is BaStatus.PREPARED
            and len(self.commit_senders.get(key, set())) >= 2 * self.f + 1
        ):
            out += self._commit(now)
        return out

    def _become_prepared(self, now: float) -> list[Action]:
        self._set_status(BaStatus.PREPARED, outcome=self.accepted.outcome.name.lower())
        msg = BaCommit(self.view, self.tid, self.accepted_digest,
                       self.accepted.outcome, self.me)
        self._own_commit = seal(self.host.signer, self.host.name, msg)
        self.commit_senders.setdefault(self._key(), set()).add(self.me)
        out: list[Action] = [Send(d, self._own_commit) for d in self._others()]
        out += self._reeval(now)
        return out

    def _commit(self, now: float) -> list[Action]:
        assert self.accepted is not None
        outcome, cert = self.accepted.outcome, self.accepted.cert
        self._set_status(
            BaStatus.COMMITTED,
            outcome=outcome.name.lower(),
            digest=self.accepted_digest.hex(),
            cert=cert.summary(),
            senders=sorted(self.commit_senders.get(self._key(), set())),
        )
        return self.host.decision_reached(outcome, cert, now)

    # -- view changes ----------------------------------------------------------

    def on_timer(self, view: int, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or view != self.pending_view:
            return []
        return self._send_view_change(self.pending_view + 1, now, reason="timeout")

    def _suspect(self, reason: str, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or self.pending_view > self.view:
            return []
        return self._send_view_change(self.view + 1, now, reason=reason)

    def _send_view_change(self, target: int, now: float, reason: str) -> list[Action]:
        if self.accepted is not None:
            proof: tuple[SignedEnvelope, ...] = ()
            envs = self.prepare_envs.get(
                (self.accepted.view, self.accepted_digest, self.accepted.outcome), {}
            )
            if len(envs) >= 2 * self.f:
                proof = tuple(envs[i] for i in sorted(envs)[: 2 * self.f])
            payload = ViewChangePayload(pre_prepare=self.accepted, prepared_proof=proof)
        else:
            fallback = DecisionCertificate.build(
                self.tid, self.host.local_registrations(), self.host.local_votes()
            )
            payload = ViewChangePayload(fallback_cert=fallback)
        msg = ViewChange(target, self.tid, payload, self.me)
        env = seal(self.host.signer, self.host.name, msg)
        self._own_view_change = env
        digest = envelope_digest(env)
        self.view_changes.setdefault(target, {})[self.me] = (digest, env, msg)
        self.vc_by_digest[digest] = env
        self.pending_view = target
        self._trace("stateTransition", object="agreement", event="view-change-sent",
                    frm=f"view-{self.view}", to=f"view-{target}", reason=reason,
                    tid=self.tid)
        out: list[Action] = [Send(d, env) for d in self._others()]
        out += self._arm_timer(target)
        # The primary-elect may already hold enough view changes from others.
        out += self._maybe_install_as_primary(target, now)
        return out

    def on_view_change(self, env: SignedEnvelope, msg: ViewChange, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED:
            self._trace("drop", reason="view-change-ignored-committed", sender=env.sender)
            return []
        if msg.tid != self.tid:
            return []
        if env.sender != replica_name(msg.replica):
            self._trace("byzantineEvidence", reason="replica-id-mismatch", sender=env.sender)
            return []
        if msg.view <= self.view:
            self._trace("drop", reason="view-change-stale", view=msg.view)
            return []
        ok, why = validate_view_change(msg, self.f, self.tid, self.host.directory)
        if not ok:
            self._trace("byzantineEvidence", reason=f"view-change-invalid:{why}",
                        sender=env.sender, view=msg.view)
            return []
        digest = envelope_digest(env)
        self.view_changes.setdefault(msg.view, {}).setdefault(
            msg.replica, (digest, env, msg)
        )
        self.vc_by_digest[digest] = env
        out: list[Action] = []
        store = self.view_changes[msg.view]
        # Join rule: f+1 distinct valid view changes pull in a replica that
        # has not timed out itself.
        if msg.view > self.pending_view and len(store) >= self.f + 1:
            out += self._send_view_change(msg.view, now, reason="join")
            return out
        out += self._maybe_install_as_primary(msg.view, now)
        return out

    def _maybe_install_as_primary(self, view: int, now: float) -> list[Action]:
        if not self._is_primary(view) or view <= self.view or view < self.pending_view:
            return []
        if self.status is BaStatus.COMMITTED:
            return []
        store = self.view_changes.get(view, {})
        if self.me not in store:
            # Counting includes the view change we sent "or would have sent":
            # with 2f from others in hand, issue our own now and re-enter.
            if len(store) < 2 * self.f:
                return []
            return self._send_view_change(view, now, reason="primary-elect")
        if len(store) < 2 * self.f + 1:
            return []
        out: list[Action] = []
        others = [i for i in sorted(store) if i != self.me]
        chosen = sorted([self.me] + others[: 2 * self.f])
        items = [(rid, store[rid][2].payload) for rid in chosen]
        outcome, cert = build_new_view(self.tid, self.f, items, self.host.directory)
        refs = tuple((rid, store[rid][0]) for rid in chosen)
        msg = NewView(view, self.tid, outcome, cert, refs)
        env = seal(self.host.signer, self.host.name, msg)
        self.view = view
        self.pending_view = view
        self.accepted = PrePrepareTuple(view, self.tid, outcome, cert)
        self.accepted_digest = certificate_digest(cert)
        self._own_pre_prepare = env  # retransmitted in place of a pre-prepare
        self._trace("stateTransition", object="agreement", event="view-installed",
                    frm="-", to=f"view-{view}", role="primary", view=view, tid=self.tid)
        self._set_status(BaStatus.PRE_PREPARED, role="new-primary",
                         outcome=outcome.name.lower())
        out += [Send(d, env) for d in self._others()]
        out += self.host.merge_certificate_registrations(cert, self.host.name)
        out += self._become_prepared(now)
        return out

    def on_new_view(self, env: SignedEnvelope, msg: NewView, now: float) -> list[Action]:
        if self.status is BaStatus.COMMITTED or msg.tid != self.tid:
            return []
        if msg.view <= self.view or msg.view < self.pending_view:
            self._trace("drop", reason="new-view-stale", view=msg.view)
            return []
        if env.sender != replica_name(primary_of(msg.view, self.f)):
            self._trace("byzantineEvidence", reason="new-view-not-from-primary",
                        sender=env.sender, view=msg.view)
            return []
        missing = {d for _, d in msg.vc_refs if d not in self.vc_by_digest}
        if missing:
            self.pending_new_view = (env, msg, missing)
            fetch = ViewChangeFetch(msg.view, self.tid, tuple(sorted(missing)), self.me)
            return [Send(env.sender, seal(self.host.signer, self.host.name, fetch))]
        return self._finish_new_view(env, msg, now)

    def _finish_new_view(self, env: SignedEnvelope, msg: NewView, now: float) -> list[Action]:
        self.pending_new_view = None
        if self.status is BaStatus.COMMITTED or msg.view <= self.view:
            return []
        reject = self._verify_new_view(msg)
        if reject is not None:
            self._trace("byzantineEvidence", reason=f"new-view-rejected:{reject}",
                        sender=env.sender, view=msg.view)
            if self.pending_view <= msg.view:
                return self._send_view_change(msg.view + 1, now, reason=f"bad-new-view:{reject}")
            return []
        out = self.host.merge_certificate_registrations(msg.cert, env.sender)
        self.view = msg.view
        self.pending_view = msg.view
        self.accepted = PrePrepareTuple(msg.view, self.tid, msg.outcome, msg.cert)
        self.accepted_digest = certificate_digest(msg.cert)
        self._trace("stateTransition", object="agreement", event="view-installed",
                    frm="-", to=f"view-{msg.view}", role="backup", view=msg.view,
                    tid=self.tid)
        self._set_status(BaStatus.PRE_PREPARED, role="backup",
                         outcome=msg.outcome.name.lower())
        out += self._arm_timer(msg.view)
        prep = BaPrepare(self.view, self.tid, self.accepted_digest, msg.outcome, self.me)
        self._own_prepare = seal(self.host.signer, self.host.name, prep)
        self.prepare_envs.setdefault(self._key(), {})[self.me] = self._own_prepare
        out += [Send(d, self._own_prepare) for d in self._backups_except_me(self.view)]
        out += self._reeval(now)
        return out

    def _verify_new_view(self, msg: NewView) -> str | None:
        """Re-run the primary's construction rules; None means acceptable."""
        if len(msg.vc_refs) != 2 * self.f + 1:
            return "ref-count"
        seen: set[int] = set()
        items: list[tuple[int, ViewChangePayload]] = []
        for rid, digest in msg.vc_refs:
            if rid in seen:
                return "duplicate-sender"
            seen.add(rid)
            env = self.vc_by_digest.get(digest)
            if env is None:
                return "missing-view-change"
            if env.sender != replica_name(rid):
                return "ref-sender-mismatch"
            if not self.host.directory.verify(env.sender, env.signing_payload(), env.sig):
                return "ref-signature"
            try:
                vc = decode_message(env.kind, env.body)
            except CodecError:
                return "ref-body"
            if not isinstance(vc, ViewChange) or vc.view != msg.view or vc.replica != rid:
                return "ref-shape"
            ok, why = validate_view_change(vc, self.f, self.tid, self.host.directory)
            if not ok:
                return f"ref-invalid:{why}"
            items.append((rid, vc.payload))
        outcome, cert = build_new_view(self.tid, self.f, items, self.host.directory)
        if outcome is not msg.outcome:
            return "outcome-mismatch"
        if certificate_digest(cert) != certificate_digest(msg.cert):
            return "certificate-mismatch"
        return None

    def on_fetch(self, env: SignedEnvelope, msg: ViewChangeFetch, now: float) -> list[Action]:
        if msg.tid != self.tid:
            return []
        found = tuple(
            self.vc_by_digest[d] for d in msg.digests if d in self.vc_by_digest
        )
        if not found:
            return []
        reply = ViewChangeFetchReply(msg.view, self.tid, found)
        return [Send(env.sender, seal(self.host.signer, self.host.name, reply))]

    def on_fetch_reply(self, env: SignedEnvelope, msg: ViewChangeFetchReply, now: float) -> list[Action]:
        if msg.tid != self.tid or self.pending_new_view is None:
            return []
        nv_env, nv_msg, missing = self.pending_new_view
        for vc_env in msg.envelopes:
            digest = envelope_digest(vc_env)
            if digest not in missing:
                continue
            if not self.host.directory.verify(
                vc_env.sender, vc_env.signing_payload(), vc_env.sig
            ):
                self._trace("byzantineEvidence", reason="fetched-vc-bad-signature",
                            sender=env.sender)
                continue
            self.vc_by_digest[digest] = vc_env
            missing.discard(digest)
        if missing:
            return []
        return self._finish_new_view(nv_env, nv_msg, now)

    # -- retransmission -----------------------------------------------------

    def nudge(self) -> list[Action]:
        """Re-multicast the latest outbound protocol message.

        Periodic retransmission keeps the instance live on a lossy network:
        the paper-level assumption of an eventual delivery bound is realized
        by repeating sends until the transaction completes.
        """
        out: list[Action] = []
        if self.pending_view > self.view:
            if self._own_view_change is not None:
                out += [Send(d, self._own_view_change) for d in self._others()]
            return out
        if self._is_primary(self.view) and self._own_pre_prepare is not None:
            out += [Send(d, self._own_pre_prepare) for d in self._others()]
        if self._own_prepare is not None and not self._is_primary(self.view):
            key = (self.view, self.accepted_digest, self.accepted.outcome) if self.accepted else None
            if key is not None and self.prepare_envs.get(key, {}).get(self.me) is self._own_prepare:
                out += [Send(d, self._own_prepare) for d in self._backups_except_me(self.view)]
        if self._own_commit is not None and self.status in (BaStatus.PREPARED, BaStatus.COMMITTED):
            out += [Send(d, self._own_commit) for d in self._others()]
        return out
