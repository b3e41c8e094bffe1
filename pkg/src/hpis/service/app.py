"""FastAPI applications for real (loopback HTTP) mode.

Both apps expose ``POST /wire``: the body is one transport frame holding a
request envelope, the response is one frame holding the reply envelope.
Node apps add JSON endpoints an operator uses to drive a running node.
"""

import logging
import threading

from fastapi import BackgroundTasks, FastAPI, HTTPException, Request, Response
from fastapi.concurrency import run_in_threadpool

from .. import scenario as scn
from .. import supply, transport
from ..errors import HpisError
from .schemas import (ChannelModel, DispenseRequest, DispenseResponse, ErrorResponse,
                      HandshakeResponse, HealthResponse, LedgerResponse, RecordsResponse,
                      StepResponse)

log = logging.getLogger(__name__)

OCTET = "application/octet-stream"
_ERRORS = {400: {"model": ErrorResponse}}


async def _serve_wire(request, handler):
    wire = await request.body()
    try:
        reply = await run_in_threadpool(transport.serve_frame, handler, wire)
    except HpisError as exc:
        raise HTTPException(400, detail={"code": exc.code, "detail": str(exc)}) from None
    return Response(content=reply, media_type=OCTET)


def create_registry_app(service):
    """``service`` is a RegistryService; its Registry is reachable as ``service.registry``."""
    app = FastAPI(title="HPIS service registry")

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(participant=service.participant_id, role="registry")

    @app.post("/wire", responses=_ERRORS)
    async def wire(request: Request):
        return await _serve_wire(request, service.handle)

    @app.get("/records", response_model=RecordsResponse)
    def records():
        return RecordsResponse(keys=service.registry.keys())

    return app


class NodeRuntime:
    """A supply node plus the locking needed to share it between HTTP worker threads.

    Node state is only touched under ``lock``; outbound sends happen with the
    lock released, so two nodes calling each other cannot deadlock.
    """

    def __init__(self, node, network, sc, registry_client, address):
        self.node = node
        self.network = network
        self.sc = sc
        self.registry = registry_client
        self.address = address
        self.lock = threading.RLock()

    def handle(self, payload):
        with self.lock:
            return self.node.handle(payload)

    def _on_response(self, pending, raw):
        with self.lock:
            self.node.on_response(raw)

    def flush(self):
        return self.network.dispatch(self._on_response)

    def publish(self):
        return self.registry.publish(scn.service_description(self.sc, self.node.id, self.address))

    def handshake(self):
        me = self.node.id
        out = []
        for a, b in scn.channels(self.sc):
            if me not in (a, b):
                continue
            peer = b if a == me else a
            plan, reason = scn.channel_plan(self.sc, self.registry, me, peer)
            with self.lock:
                self.node.set_plan(peer, plan)
            out.append(ChannelModel(peer=peer, status="agreed" if plan else "refused",
                                    plan=plan.describe() if plan else None,
                                    reason=reason or None))
        return out


def create_node_app(runtime):
    node = runtime.node
    app = FastAPI(title=f"HPIS {node.role} node {node.id}")

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(participant=node.id, role=node.role)

    @app.post("/wire", responses=_ERRORS)
    async def wire(request: Request, background: BackgroundTasks):
        response = await _serve_wire(request, runtime.handle)
        background.add_task(runtime.flush)
        return response

    @app.get("/ledger", response_model=LedgerResponse)
    def ledger():
        with runtime.lock:
            consumed = dict(getattr(node, "consumed", {}))
            return LedgerResponse(participant=node.id, on_hand=dict(sorted(node.ledger.on_hand.items())),
                                  in_transit=node.ledger.total_in_transit(),
                                  consumed=dict(sorted(consumed.items())))

    @app.post("/handshake", response_model=HandshakeResponse, responses=_ERRORS)
    def handshake():
        try:
            return HandshakeResponse(channels=runtime.handshake())
        except HpisError as exc:
            raise HTTPException(400, detail={"code": exc.code, "detail": str(exc)}) from None

    @app.post("/dispense", response_model=DispenseResponse, responses=_ERRORS)
    def dispense(req: DispenseRequest):
        if not isinstance(node, supply.PharmacyNode):
            raise HTTPException(400, detail={"code": "RoleDenied",
                                             "detail": f"{node.role} does not dispense"})
        try:
            with runtime.lock:
                drug = node.ctx.ontology.normalize_term(req.term)
                served = node.dispense(req.term, req.quantity, req.patient, req.date)
        except HpisError as exc:
            raise HTTPException(400, detail={"code": exc.code, "detail": str(exc)}) from None
        return DispenseResponse(drug=drug, served=served)

    @app.post("/step", response_model=StepResponse)
    def step():
        """Run this node's periodic duty, then deliver everything it queued."""
        with runtime.lock:
            if isinstance(node, supply.PharmacyNode):
                orders = node.pharmacy_step()
            elif isinstance(node, supply.DepotNode):
                orders = [o for o in [node.replenish()] if o is not None]
            elif isinstance(node, supply.NationalNode):
                orders = [o for o in [node.close_window()] if o is not None]
            else:
                orders = []
        delivered = runtime.flush()
        return StepResponse(orders=[o.order_id for o in orders], delivered=delivered)

    return app
