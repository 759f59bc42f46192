from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from tndp.core import (
    DecisionSpace,
    DecisionSpaceError,
    Design,
    ExperimentHistory,
    GaussianPrediction,
    GlobalInfo,
    InvalidDesignError,
    Outcome,
    TNDPInput,
    optimal_decision,
)
from tndp.model import TNDP, load_weights, policy_distribution
from tndp.service.schemas import (
    DecideRequest,
    DecideResponse,
    DesignIn,
    HealthResponse,
    ModelRequest,
    PredictRequest,
    PredictResponse,
    ProposeRequest,
    ProposeResponse,
)


def _input(model: TNDP, req: ModelRequest, prediction, query) -> TNDPInput:
    cfg = model.config
    if len(req.context) > cfg.max_steps:
        raise HTTPException(422, f"model supports at most {cfg.max_steps} observations, got {len(req.context)}")
    if len(req.task_context) != cfg.gamma_dim:
        raise HTTPException(422, f"task_context must have {cfg.gamma_dim} entries")
    pairs = tuple((Design(o.x, o.tag), Outcome(o.y)) for o in req.context)
    try:
        history = ExperimentHistory(pairs, dim=cfg.d_x)
        return TNDPInput(history, tuple(Design(d.x, d.tag) for d in prediction),
                         tuple(Design(d.x, d.tag) for d in query),
                         GlobalInfo(len(pairs), tuple(req.task_context)))
    except (InvalidDesignError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from exc


def _check_tags(model: TNDP, designs) -> None:
    n = model.config.n_decisions
    for d in designs:
        if n and (d.tag is None or d.tag >= n):
            raise HTTPException(422, f"every design needs a tag in [0, {n})")
        if not n and d.tag is not None:
            raise HTTPException(422, "this model does not take decision tags")


def _forward(model: TNDP, inp: TNDPInput):
    try:
        return model.predict_input(inp)
    except ValueError as exc:
        raise HTTPException(422, str(exc)) from exc


def create_app(checkpoint: str) -> FastAPI:
    model = load_weights(checkpoint).eval()
    app = FastAPI(title="tndp", version="0.1.0")

    @app.get("/health", response_model=HealthResponse)
    def health():
        c = model.config
        return HealthResponse(status="ok", signature=c.signature(), d_x=c.d_x, max_steps=c.max_steps,
                              n_decisions=c.n_decisions, gamma_dim=c.gamma_dim)

    @app.post("/propose", response_model=ProposeResponse)
    def propose(req: ProposeRequest):
        _check_tags(model, [*req.context, *req.query, *req.prediction])
        inp = _input(model, req, req.prediction, req.query)
        out = _forward(model, inp)
        probs = policy_distribution(out.logits[0].double().numpy())
        i = int(np.argmax(probs))
        return ProposeResponse(index=i, design=DesignIn(x=req.query[i].x, tag=req.query[i].tag),
                               probabilities=probs.tolist(), step=inp.global_info.step)

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        _check_tags(model, [*req.context, *req.prediction])
        inp = _input(model, req, req.prediction, ())
        out = _forward(model, inp)
        return PredictResponse(mean=out.mean[0].tolist(), std=out.std[0].tolist(), step=inp.global_info.step)

    @app.post("/decide", response_model=DecideResponse)
    def decide(req: DecideRequest):
        if len(req.mean) != len(req.std):
            raise HTTPException(422, "mean and std must have the same length")
        try:
            if req.kind == "distribution-output":
                space = DecisionSpace.distribution_output()
            elif req.kind == "discrete-arm":
                space = DecisionSpace.discrete_arm(len(req.mean))
            else:
                space = DecisionSpace.top_k(req.k or 1)
            decision, value = optimal_decision((np.asarray(req.mean), np.asarray(req.std)), space,
                                               n_samples=req.n_samples,
                                               rng=np.random.default_rng(req.seed))
        except (DecisionSpaceError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from exc
        if isinstance(decision, GaussianPrediction):
            decision = [decision.mean, decision.std]
        elif isinstance(decision, tuple):
            decision = [int(v) for v in decision]
        else:
            decision = int(decision)
        return DecideResponse(decision=decision, value=float(value))

    return app
