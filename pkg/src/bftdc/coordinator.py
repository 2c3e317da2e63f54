"""Coordinator replica state machine.

Each replica runs the distributed-commit phases for one transaction:
collect registrations, run the prepare phase on the initiator's commit
request (or skip it on an abort request), hand the assembled decision
certificate to the Byzantine agreement instance, and disseminate the
agreed outcome to every participant whose endpoint it knows.
"""

from __future__ import annotations

from enum import Enum

from .actions import Action, Send, StartTimer, Tracer, null_tracer
from .agreement import AgreementInstance, BaStatus
from .crypto import KeyDirectory, Signer
from .messages import (
    BaCommit,
    BaPrepare,
    BaPrePrepare,
    DecisionCertificate,
    DecisionNotification,
    EndpointQuery,
    EndpointReply,
    InitiatorAbortRequest,
    InitiatorCommitRequest,
    InvalidEnvelope,
    NewView,
    Outcome,
    PrepareRequest,
    Register,
    RegisterAck,
    RegistrationRecord,
    SignedEnvelope,
    TransactionId,
    ViewChange,
    ViewChangeFetch,
    ViewChangeFetchReply,
    VoteMsg,
    VoteRecord,
    evaluate_outcome,
    open_envelope,
    replica_name,
    seal,
)

PREPARE_TAG = "prepare"
RETRANSMIT_TAG = "retransmit"


class Phase(Enum):
    COLLECTING = "collecting"
    PREPARING = "preparing"
    AGREEING = "agreeing"
    DECIDED = "decided"


class CoordinatorReplica:
    def __init__(
        self,
        replica_id: int,
        tid: TransactionId,
        f: int,
        initiator: str,
        signer: Signer,
        directory: KeyDirectory,
        tracer: Tracer = null_tracer,
        *,
        prepare_timeout: float = 10.0,
        agreement_timeout: float = 50.0,
        retransmit_interval: float = 20.0,
    ) -> None:
        self.replica_id = replica_id
        self.name = replica_name(replica_id)
        self.tid = tid
        self.f = f
        self.n = 3 * f + 1
        self.initiator = initiator
        self.signer = signer
        self.directory = directory
        self.tracer = tracer
        self.prepare_timeout = prepare_timeout
        self.agreement_timeout = agreement_timeout
        self.retransmit_interval = retransmit_interval

        self.phase = Phase.COLLECTING
        self.registrations: dict[str, RegistrationRecord] = {}
        self.endpoints: dict[str, str] = {}
        self.votes: dict[str, VoteRecord] = {}
        self.initiator_request: SignedEnvelope | None = None
        self.agreement: AgreementInstance | None = None
        self.decided: tuple[Outcome, DecisionCertificate] | None = None
        self.queried: set[str] = set()

    # -- host API used by the agreement instance ------------------------------

    def local_registrations(self) -> dict[str, RegistrationRecord]:
        return dict(self.registrations)

    def local_votes(self) -> dict[str, VoteRecord]:
        return dict(self.votes)

    def merge_certificate_registrations(
        self, cert: DecisionCertificate, source: str
    ) -> list[Action]:
        """Adopt registrations we had not seen; ask the certificate's sender
        for the endpoint of each newly learned participant."""
        out: list[Action] = []
        for entry in cert.entries:
            pid = entry.participant
            if pid not in self.registrations:
                self.registrations[pid] = entry.registration
                self._trace("stateTransition", object="coordinator",
                            event="registration-merged", frm="-", to="-",
                            participant=pid, source=source, tid=self.tid)
            if pid not in self.endpoints and pid not in self.queried and source != self.name:
                self.queried.add(pid)
                query = EndpointQuery(self.tid, pid, self.replica_id)
                out.append(Send(source, seal(self.signer, self.name, query)))
        return out

    def decision_reached(
        self, outcome: Outcome, cert: DecisionCertificate, now: float
    ) -> list[Action]:
        self.decided = (outcome, cert)
        self._phase_to(Phase.DECIDED, outcome=outcome.name.lower())
        return self._notify_all()

    # -- helpers ---------------------------------------------------------------

    def _trace(self, kind: str, **detail) -> None:
        self.tracer(kind, self.name, detail)

    def _phase_to(self, new: Phase, **detail) -> None:
        self._trace("stateTransition", object="coordinator", frm=self.phase.value,
                    to=new.value, tid=self.tid, **detail)
        self.phase = new

    def _ensure_agreement(self, now: float) -> list[Action]:
        if self.agreement is not None:
            return []
        self.agreement = AgreementInstance(self, self.tracer, self.agreement_timeout)
        out = self.agreement.activate(now)
        out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
        return out

    def _notify_all(self) -> list[Action]:
        assert self.decided is not None
        outcome, _ = self.decided
        msg = DecisionNotification(self.tid, outcome, self.replica_id)
        env = seal(self.signer, self.name, msg)
        out: list[Action] = [Send(ep, env) for _, ep in sorted(self.endpoints.items())]
        out.append(Send(self.initiator, env))
        return out

    # -- event entry points ------------------------------------------------------

    def handle(self, env: SignedEnvelope, now: float) -> list[Action]:
        try:
            msg = open_envelope(self.directory, env)
        except InvalidEnvelope as exc:
            self._trace("byzantineEvidence", reason=exc.reason, sender=env.sender,
                        kind=env.kind.name)
            return []

        if isinstance(msg, Register):
            return self._on_register(env, msg, now)
        if isinstance(msg, (InitiatorCommitRequest, InitiatorAbortRequest)):
            return self._on_initiator_request(env, msg, now)
        if isinstance(msg, VoteMsg):
            return self._on_vote(env, msg, now)
        if isinstance(msg, EndpointQuery):
            return self._on_endpoint_query(env, msg)
        if isinstance(msg, EndpointReply):
            return self._on_endpoint_reply(env, msg)
        if isinstance(msg, BaPrePrepare):
            return self._agreement_event(now, "on_ba_pre_prepare", env, msg)
        if isinstance(msg, BaPrepare):
            return self._agreement_event(now, "on_ba_prepare", env, msg)
        if isinstance(msg, BaCommit):
            return self._agreement_event(now, "on_ba_commit", env, msg)
        if isinstance(msg, ViewChange):
            return self._agreement_event(now, "on_view_change", env, msg)
        if isinstance(msg, NewView):
            return self._agreement_event(now, "on_new_view", env, msg)
        if isinstance(msg, ViewChangeFetch):
            return self._agreement_event(now, "on_fetch", env, msg)
        if isinstance(msg, ViewChangeFetchReply):
            return self._agreement_event(now, "on_fetch_reply", env, msg)
        return []

    def _agreement_event(self, now: float, method: str, env: SignedEnvelope, msg) -> list[Action]:
        out = self._ensure_agreement(now)
        out += getattr(self.agreement, method)(env, msg, now)
        return out

    def on_timer(self, tag: str, now: float) -> list[Action]:
        if tag == PREPARE_TAG:
            return self._on_prepare_timeout(now)
        if tag == RETRANSMIT_TAG:
            out: list[Action] = []
            if self.decided is not None:
                out += self._notify_all()
            if self.agreement is not None:
                out += self.agreement.nudge()
            out.append(StartTimer(self.retransmit_interval, RETRANSMIT_TAG))
            return out
        if tag.startswith("ba:") and self.agreement is not None:
            return self.agreement.on_timer(int(tag.split(":", 1)[1]), now)
        return []

    # -- registration ------------------------------------------------------------

    def _on_register(self, env: SignedEnvelope, msg: Register, now: float) -> list[Action]:
        record = msg.record
        if (
            env.sender != record.participant
            or msg.tid != self.tid
            or not record.verify(self.directory)
        ):
            self._trace("byzantineEvidence", reason="bad-registration", sender=env.sender)
            return []
        if self.phase is not Phase.COLLECTING:
            if record.participant not in self.registrations:
                self._trace("stateTransition", object="coordinator",
                            event="late-registration-rejected", frm="-", to="-",
                            participant=record.participant, phase=self.phase.value,
                            tid=self.tid)
                return []
            # Known participant retransmitting: re-ack so it can settle.
        self.registrations.setdefault(record.participant, record)
        self.endpoints.setdefault(record.participant, msg.endpoint)
        ack = RegisterAck(self.tid, self.replica_id, record.participant)
        return [Send(record.participant, seal(self.signer, self.name, ack))]

    # -- prepare phase --------------------------------------------------------------

    def _on_initiator_request(self, env: SignedEnvelope, msg, now: float) -> list[Action]:
        if env.sender != self.initiator or msg.tid != self.tid:
            self._trace("byzantineEvidence", reason="request-not-from-initiator",
                        sender=env.sender)
            return []
        if self.phase is not Phase.COLLECTING:
            return []
        self.initiator_request = env
        out = self._ensure_agreement(now)
        if isinstance(msg, InitiatorAbortRequest):
            # Abort skips the prepare phase: agree on abort over the
            # registrations collected so far.
            out += self._start_agreement(now)
            return out
        self._phase_to(Phase.PREPARING, participants=sorted(self.registrations))
        if not self.registrations:
            out += self._start_agreement(now)
            return out
        request = PrepareRequest(self.tid, self.replica_id, env)
        penv = seal(self.signer, self.name, request)
        out += [Send(self.endpoints[pid], penv) for pid in sorted(self.registrations)]
        out.append(StartTimer(self.prepare_timeout, PREPARE_TAG))
        return out

    def _on_vote(self, env: SignedEnvelope, msg: VoteMsg, now: float) -> list[Action]:
        record = msg.record
        if env.sender != record.participant or record.tid != self.tid:
            self._trace("drop", reason="vote-mismatched", sender=env.sender)
            return []
        if not record.verify(self.directory):
            self._trace("byzantineEvidence", reason="vote-bad-signature", sender=env.sender)
            return []
        if record.participant not in self.registrations:
            self._trace("drop", reason="vote-from-unregistered", sender=env.sender)
            return []
        if self.phase is not Phase.PREPARING:
            return []
        prior = self.votes.get(record.participant)
        if prior is not None:
            if prior.vote is not record.vote:
                self._trace("byzantineEvidence", reason="conflicting-vote",
                            participant=record.participant, first=prior.vote.name.lower(),
                            second=record.vote.name.lower())
            return []
        self.votes[record.participant] = record
        self._trace("stateTransition", object="coordinator", event="vote-recorded",
                    frm="-", to="-", participant=record.participant,
                    vote=record.vote.name.lower(), tid=self.tid)
        if set(self.votes) == set(self.registrations):
            return self._start_agreement(now)
        return []

    def _on_prepare_timeout(self, now: float) -> list[Action]:
        if self.phase is not Phase.PREPARING:
            return []
        self._trace("stateTransition", object="coordinator", event="prepare-timeout",
                    frm="-", to="-", missing=sorted(set(self.registrations) - set(self.votes)),
                    tid=self.tid)
        return self._start_agreement(now)

    def _start_agreement(self, now: float) -> list[Action]:
        cert = DecisionCertificate.build(self.tid, self.registrations, self.votes)
        outcome = evaluate_outcome(cert)
        self._phase_to(Phase.AGREEING, outcome=outcome.name.lower())
        out = self._ensure_agreement(now)
        out += self.agreement.propose(outcome, cert, now)
        return out

    # -- endpoint exchange -------------------------------------------------------------

    def _on_endpoint_query(self, env: SignedEnvelope, msg: EndpointQuery) -> list[Action]:
        if msg.tid != self.tid:
            return []
        record = self.registrations.get(msg.participant)
        endpoint = self.endpoints.get(msg.participant)
        if record is None or endpoint is None:
            reply = EndpointReply(self.tid, msg.participant, found=False)
        else:
            reply = EndpointReply(self.tid, msg.participant, found=True,
                                  record=record, endpoint=endpoint)
        return [Send(env.sender, seal(self.signer, self.name, reply))]

    def _on_endpoint_reply(self, env: SignedEnvelope, msg: EndpointReply) -> list[Action]:
        if msg.tid != self.tid or not msg.found:
            return []
        if msg.record is None or msg.endpoint is None:
            return []
        if (
            msg.record.participant != msg.participant
            or msg.record.tid != self.tid
            or not msg.record.verify(self.directory)
        ):
            self._trace("byzantineEvidence", reason="endpoint-reply-bad-registration",
                        sender=env.sender)
            return []
        self.registrations.setdefault(msg.participant, msg.record)
        if msg.participant not in self.endpoints:
            self.endpoints[msg.participant] = msg.endpoint
            self._trace("stateTransition", object="coordinator", event="endpoint-learned",
                        frm="-", to="-", participant=msg.participant, tid=self.tid)
        return []
