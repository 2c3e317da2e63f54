"""Participant and initiator state machines.

A participant registers with every coordinator replica, replies to the
initiator once 2f+1 distinct replicas acknowledged the registration,
votes on the first valid prepare request, and applies an outcome only
after f+1 distinct replicas notified the same decision. A participant
that has not voted PREPARED may abort unilaterally.

The initiator propagates the transaction, collects replies, issues a
single commit request (all replies ok) or abort request (any exception
or the reply deadline), and then awaits its own decision quorum like any
other participant.
"""

from __future__ import annotations

from enum import Enum

from .actions import Action, Send, StartTimer, Tracer, null_tracer
from .crypto import KeyDirectory, Signer
from .messages import (
    DecisionNotification,
    InitiatorAbortRequest,
    InitiatorCommitRequest,
    InvalidEnvelope,
    MessageKind,
    Outcome,
    PrepareRequest,
    Register,
    RegisterAck,
    RegistrationRecord,
    SignedEnvelope,
    TransactionId,
    TxPropagate,
    TxReply,
    Vote,
    VoteMsg,
    VoteRecord,
    open_envelope,
    replica_name,
    seal,
)

RETRANSMIT_TAG = "retransmit"


class ParticipantState(Enum):
    IDLE = "idle"
    REGISTERING = "registering"
    REGISTERED = "registered"
    PREPARED = "prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"

TERMINAL = (ParticipantState.COMMITTED, ParticipantState.ABORTED)


class Participant:
    def __init__(
        self,
        name: str,
        endpoint: str,
        tid: TransactionId,
        f: int,
        initiator: str,
        signer: Signer,
        directory: KeyDirectory,
        tracer: Tracer = null_tracer,
        *,
        willing: bool = True,
        refuse: bool = False,
        unilateral_abort_after: float | None = None,
        retransmit_interval: float = 20.0,
    ) -> None:
        self.name = name
        self.endpoint = endpoint
        self.tid = tid
        self.f = f
        self.n = 3 * f + 1
        self.initiator = initiator
        self.signer = signer
        self.directory = directory
        self.tracer = tracer
        self.willing = willing
        self.refuse = refuse
        self.unilateral_abort_after = unilateral_abort_after
        self.retransmit_interval = retransmit_interval

        self.state = ParticipantState.IDLE
        self.acks: set[int] = set()
        self.pending_decisions: dict[Outcome, set[int]] = {
            Outcome.COMMIT: set(),
            Outcome.ABORT: set(),
        }
        self.vote_env: SignedEnvelope | None = None
        self.vote_value: Vote | None = None
        self.prepare_requesters: set[int] = set()
        self.register_env: SignedEnvelope | None = None
        self.unilateral = False

    # -- helpers ----------------------------------------------------------

    def _trace(self, kind: str, **detail) -> None:
        self.tracer(kind, self.name, detail)

    def _transition(self, new: ParticipantState, **detail) -> None:
        self._trace(
            "stateTransition",
            object="participant",
            frm=self.state.value,
            to=new.value,
            tid=self.tid,
            **detail,
        )
        self.state = new

    def _replica_of(self, env: SignedEnvelope, claimed: int) -> int | None:
        if 0 <= claimed < self.n and env.sender == replica_name(claimed):
            return claimed
        self._trace("byzantineEvidence", reason="replica-id-mismatch", sender=env.sender)
        return None

    # -- event entry points ------------------------------------------------

    def handle(self, env: SignedEnvelope, now: float) -> list[Action]:
        try:
            msg = open_envelope(self.directory, env)
        except InvalidEnvelope as exc:
            self._trace("byzantineEvidence", reason=exc.reason, sender=env.sender,
                        kind=env.kind.name)
            return []

        if isinstance(msg, TxPropagate):
            return self._on_propagate(env, msg, now)
        if isinstance(msg, RegisterAck):
            return self._on_register_ack(env, msg, now)
        if isinstance(msg, PrepareRequest):
            return self._on_prepare_request(env, msg, now)
        if isinstance(msg, DecisionNotification):
            return self._on_decision(env, msg, now)
        self._trace("byzantineEvidence", reason="unexpected-kind", kind=env.kind.name,
                    sender=env.sender)
        return []

    def on_timer(self, tag: str, now: float) -> list[Action]:
        if tag == "unilateral":
            if self.state is ParticipantState.REGISTERED and self.vote_value is None:
                self.unilateral = True
                self._transition(ParticipantState.ABORTED, reason="unilateral")
            return []
        if tag == RETRANSMIT_TAG:
            # Re-multicast the registration while stuck registering; acks or
            # decisions eventually unstick us on a lossy network.
            if self.state is ParticipantState.REGISTERING and self.register_env:
                out: list[Action] = [
                    Send(replica_name(i), self.register_env) for i in range(self.n)
                ]
                out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
                return out
            return []
        return []

    # -- registration -------------------------------------------------------

    def _on_propagate(self, env: SignedEnvelope, msg: TxPropagate, now: float) -> list[Action]:
        if env.sender != self.initiator or msg.tid != self.tid:
            self._trace("byzantineEvidence", reason="bad-propagate", sender=env.sender)
            return []
        if self.state is not ParticipantState.IDLE:
            if self.state in (ParticipantState.PREPARED, *TERMINAL):
                self._trace("checkAnomaly", reason="join-after-prepare", state=self.state.value)
            return []
        if self.refuse:
            self._transition(ParticipantState.ABORTED, reason="refused-enlistment")
            return [Send(self.initiator, seal(self.signer, self.name,
                                              TxReply(self.tid, self.name, ok=False)))]
        record = RegistrationRecord.create(self.tid, self.name, self.signer)
        self.register_env = seal(self.signer, self.name, Register(record, self.endpoint))
        self._transition(ParticipantState.REGISTERING)
        out: list[Action] = [Send(replica_name(i), self.register_env) for i in range(self.n)]
        out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
        return out

    def _on_register_ack(self, env: SignedEnvelope, msg: RegisterAck, now: float) -> list[Action]:
        if self.state is not ParticipantState.REGISTERING:
            return []
        if msg.tid != self.tid or msg.participant != self.name:
            return []
        replica = self._replica_of(env, msg.replica)
        if replica is None:
            return []
        self.acks.add(replica)
        if len(self.acks) >= 2 * self.f + 1:
            self._transition(ParticipantState.REGISTERED, acks=sorted(self.acks))
            out: list[Action] = [
                Send(self.initiator, seal(self.signer, self.name,
                                          TxReply(self.tid, self.name, ok=True)))
            ]
            if self.unilateral_abort_after is not None:
                out.append(StartTimer(self.unilateral_abort_after, "unilateral"))
            return out
        return []

    # -- prepare phase -------------------------------------------------------

    def _on_prepare_request(self, env: SignedEnvelope, msg: PrepareRequest, now: float) -> list[Action]:
        if msg.tid != self.tid:
            return []
        replica = self._replica_of(env, msg.replica)
        if replica is None:
            return []
        cert = msg.prepare_certificate
        # The prepare certificate is the initiator's signed commit request;
        # skipped when the initiator's key is unknown.
        if self.directory.knows(self.initiator):
            if (
                cert.kind is not MessageKind.INITIATOR_COMMIT
                or cert.sender != self.initiator
                or not self.directory.verify(cert.sender, cert.signing_payload(), cert.sig)
            ):
                self._trace("byzantineEvidence", reason="bad-prepare-certificate",
                            sender=env.sender)
                return []

        if self.vote_env is not None:
            # Duplicate from a replica that already asked: re-send our vote to
            # it alone. First requests from other replicas were already served
            # by the original broadcast.
            if replica in self.prepare_requesters:
                return [Send(replica_name(replica), self.vote_env)]
            self.prepare_requesters.add(replica)
            return []
        self.prepare_requesters.add(replica)

        if self.state is ParticipantState.ABORTED:
            # Unilaterally aborted (or refused) before any prepare arrived:
            # answer with an aborted vote so the coordinator can move on.
            return self._cast_vote(Vote.ABORTED)
        if self.state is not ParticipantState.REGISTERED:
            self._trace("checkAnomaly", reason="prepare-out-of-order", state=self.state.value)
            return []

        if self.willing:
            self._transition(ParticipantState.PREPARED)
            return self._cast_vote(Vote.PREPARED)
        self._transition(ParticipantState.ABORTED, reason="vote-aborted")
        return self._cast_vote(Vote.ABORTED)

    def _cast_vote(self, vote: Vote) -> list[Action]:
        record = VoteRecord.create(self.tid, self.name, vote, self.signer)
        self.vote_value = vote
        self.vote_env = seal(self.signer, self.name, VoteMsg(record))
        self._trace("stateTransition", object="participant", frm="-", to="voted",
                    vote=vote.name.lower(), tid=self.tid)
        return [Send(replica_name(i), self.vote_env) for i in range(self.n)]

    # -- decision delivery ----------------------------------------------------

    def _on_decision(self, env: SignedEnvelope, msg: DecisionNotification, now: float) -> list[Action]:
        if msg.tid != self.tid:
            return []
        replica = self._replica_of(env, msg.replica)
        if replica is None:
            return []
        if self.state in TERMINAL:
            if (
                self.unilateral
                and msg.outcome is Outcome.COMMIT
                and replica not in self.pending_decisions[Outcome.COMMIT]
            ):
                self.pending_decisions[Outcome.COMMIT].add(replica)
                if len(self.pending_decisions[Outcome.COMMIT]) >= self.f + 1:
                    self._trace("checkAnomaly", reason="commit-quorum-after-unilateral-abort",
                                senders=sorted(self.pending_decisions[Outcome.COMMIT]))
            return []
        self.pending_decisions[msg.outcome].add(replica)
        senders = self.pending_decisions[msg.outcome]
        if len(senders) < self.f + 1:
            return []
        if msg.outcome is Outcome.COMMIT:
            if self.state is ParticipantState.PREPARED:
                before = self.state
                self._transition(ParticipantState.COMMITTED)
                self._trace("decisionDelivered", outcome="commit",
                            senders=sorted(senders), prior=before.value, tid=self.tid)
            else:
                # A commit quorum can only reach a participant that voted
                # PREPARED; anything else is checker-visible.
                self._trace("checkAnomaly", reason="commit-quorum-without-prepare",
                            state=self.state.value, senders=sorted(senders))
            return []
        before = self.state
        self._transition(ParticipantState.ABORTED, reason="decision")
        self._trace("decisionDelivered", outcome="abort", senders=sorted(senders),
                    prior=before.value, tid=self.tid)
        return []


class Initiator:
    """The special participant that starts and terminates the transaction."""

    def __init__(
        self,
        name: str,
        tid: TransactionId,
        f: int,
        participants: list[str],
        signer: Signer,
        directory: KeyDirectory,
        tracer: Tracer = null_tracer,
        *,
        reply_timeout: float = 30.0,
        retransmit_interval: float = 20.0,
    ) -> None:
        self.name = name
        self.tid = tid
        self.f = f
        self.n = 3 * f + 1
        self.participants = list(participants)
        self.signer = signer
        self.directory = directory
        self.tracer = tracer
        self.reply_timeout = reply_timeout
        self.retransmit_interval = retransmit_interval

        self.replies: dict[str, str] = {}
        self.request: Outcome | None = None
        self.request_env: SignedEnvelope | None = None
        self.outcome_acks: dict[Outcome, set[int]] = {
            Outcome.COMMIT: set(),
            Outcome.ABORT: set(),
        }
        self.outcome: Outcome | None = None

    def _trace(self, kind: str, **detail) -> None:
        self.tracer(kind, self.name, detail)

    def start(self, now: float) -> list[Action]:
        if not self.participants:
            return self._issue_request(Outcome.COMMIT)
        propagate = seal(self.signer, self.name, TxPropagate(self.tid))
        out: list[Action] = [Send(p, propagate) for p in self.participants]
        out.append(StartTimer(self.reply_timeout, "reply-deadline"))
        return out

    def handle(self, env: SignedEnvelope, now: float) -> list[Action]:
        try:
            msg = open_envelope(self.directory, env)
        except InvalidEnvelope as exc:
            self._trace("byzantineEvidence", reason=exc.reason, sender=env.sender,
                        kind=env.kind.name)
            return []
        if isinstance(msg, TxReply):
            return self._on_reply(env, msg)
        if isinstance(msg, DecisionNotification):
            return self._on_decision(env, msg)
        return []

    def on_timer(self, tag: str, now: float) -> list[Action]:
        if tag == "reply-deadline":
            if self.request is None:
                missing = [p for p in self.participants if p not in self.replies]
                for p in missing:
                    self.replies[p] = "timeout"
                self._trace("stateTransition", object="initiator", frm="collecting",
                            to="timed-out", missing=missing, tid=self.tid)
                return self._issue_request(Outcome.ABORT)
            return []
        if tag == RETRANSMIT_TAG:
            # Keep re-multicasting the request until we learn the outcome, so
            # a dropped request cannot stall the coordinator quorum.
            if self.request_env is not None and self.outcome is None:
                out: list[Action] = [
                    Send(replica_name(i), self.request_env) for i in range(self.n)
                ]
                out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
                return out
            return []
        return []

    def _on_reply(self, env: SignedEnvelope, msg: TxReply) -> list[Action]:
        if msg.tid != self.tid or env.sender != msg.participant:
            return []
        if msg.participant not in self.participants or msg.participant in self.replies:
            return []
        self.replies[msg.participant] = "ok" if msg.ok else "exception"
        if self.request is not None:
            return []
        if not msg.ok:
            return self._issue_request(Outcome.ABORT)
        if all(self.replies.get(p) == "ok" for p in self.participants):
            return self._issue_request(Outcome.COMMIT)
        return []

    def _issue_request(self, outcome: Outcome) -> list[Action]:
        assert self.request is None, "request is issued at most once"
        self.request = outcome
        if outcome is Outcome.COMMIT:
            msg = InitiatorCommitRequest(self.tid)
        else:
            msg = InitiatorAbortRequest(self.tid)
        self.request_env = seal(self.signer, self.name, msg)
        self._trace("stateTransition", object="initiator", frm="collecting",
                    to=f"requested-{outcome.name.lower()}", tid=self.tid)
        out: list[Action] = [Send(replica_name(i), self.request_env) for i in range(self.n)]
        out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
        return out

    def _on_decision(self, env: SignedEnvelope, msg: DecisionNotification) -> list[Action]:
        if msg.tid != self.tid or self.outcome is not None:
            return []
        if not (0 <= msg.replica < self.n) or env.sender != replica_name(msg.replica):
            self._trace("byzantineEvidence", reason="replica-id-mismatch", sender=env.sender)
            return []
        self.outcome_acks[msg.outcome].add(msg.replica)
        senders = self.outcome_acks[msg.outcome]
        if len(senders) >= self.f + 1:
            self.outcome = msg.outcome
            self._trace("stateTransition", object="initiator", frm="awaiting-decision",
                        to=msg.outcome.name.lower(), tid=self.tid)
            self._trace("decisionDelivered", outcome=msg.outcome.name.lower(),
                        senders=sorted(senders), prior="initiator", tid=self.tid)
        return []
