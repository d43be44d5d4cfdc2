"""REST lab wrapping the core package.

One process holds one simulated onion network (a Registry) plus any
number of vaults and provider profiles. The HTTP surface drives the
same code paths the library exposes: submissions go through VCHS
sessions, fetches go through pinned secure channels, and every error
maps to a status code with the exception class name in the body.

The benchmark is intentionally absent here: it is a long-running local
measurement, not a request/response operation, and runs via the CLI.
"""

from __future__ import annotations

import itertools
import threading
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, client, provider, transport, vault
from ..encoding import b64, unb64
from ..errors import (
    AuthRejected,
    BootstrapError,
    ChannelAuthFailure,
    Collision,
    ConnectFailed,
    ImportRejected,
    NotFound,
    PartialFailure,
    PinConflict,
    PinMismatch,
    PinMissing,
    QuoteMismatch,
    StartFailed,
    StartupRefused,
    SubmissionRejected,
    TeevaultError,
)
from . import schemas

_STATUS_BY_ERROR = [
    (NotFound, 404),
    (AuthRejected, 403),
    (PinMissing, 400),
    (PinMismatch, 409),
    (PinConflict, 409),
    (PartialFailure, 409),
    (QuoteMismatch, 409),
    (StartupRefused, 409),
    (Collision, 409),
    (SubmissionRejected, 422),
    (ImportRejected, 422),
    (BootstrapError, 502),
    (ChannelAuthFailure, 502),
    (ConnectFailed, 502),
    (StartFailed, 500),
]


class Lab:
    """In-process world shared by all endpoints."""

    def __init__(self):
        self.registry = transport.Registry()
        self.vaults: dict[str, vault.VaultDaemon] = {}
        self.providers: dict[str, provider.ProviderProfile] = {}
        self.pins = client.PinStore()
        self.lock = threading.RLock()
        self._seq: dict[str, itertools.count] = {}

    def next_id(self, prefix: str) -> str:
        counter = self._seq.setdefault(prefix, itertools.count(1))
        return f"{prefix}-{next(counter)}"

    def vault_or_404(self, vault_id: str) -> vault.VaultDaemon:
        daemon = self.vaults.get(vault_id)
        if daemon is None:
            raise NotFound(f"no vault {vault_id}")
        return daemon

    def provider_or_404(self, provider_id: str) -> provider.ProviderProfile:
        profile = self.providers.get(provider_id)
        if profile is None:
            raise NotFound(f"no provider {provider_id}")
        return profile

    def close(self):
        for daemon in self.vaults.values():
            daemon.close()


def _circuit(spec: Optional[schemas.CircuitSpec]) -> transport.CircuitProfile:
    if spec is None:
        return transport.CircuitProfile.local()
    return transport.CircuitProfile(
        mode=spec.mode,
        hops=spec.hops,
        min_ms=spec.min_ms,
        max_ms=spec.max_ms,
        jitter_ms=spec.jitter_ms,
    )


def _service_info(svc) -> schemas.ServiceInfo:
    return schemas.ServiceInfo(
        service_id=svc.service_id,
        state=svc.state,
        shielded=svc.shielded,
        onion_url=svc.onion_url,
        measurement=svc.measurement.hex,
        bytes_in=svc.accounting.bytes_in,
        bytes_out=svc.accounting.bytes_out,
        sessions=svc.accounting.sessions,
        ram_high_water=svc.accounting.ram_high_water,
    )


def _vault_info(vault_id: str, daemon: vault.VaultDaemon) -> schemas.VaultInfo:
    return schemas.VaultInfo(
        vault_id=vault_id,
        vchs_onion=daemon.vchs_onion or daemon.advertise_vchs(),
        attestation_public_key=daemon.attestation_public_key.hex(),
        services=[_service_info(s) for s in daemon.services.values()],
    )


def _provider_info(provider_id: str, profile: provider.ProviderProfile) -> schemas.ProviderInfo:
    return schemas.ProviderInfo(
        provider_id=provider_id,
        vault_vchs=profile.vault_vchs,
        attest=profile.attest,
        expected_measurement=profile.expected_measurement.hex,
        service_onion=profile.service_onion,
        pinned_cert_hash=(
            profile.pinned_cert_hash.hex() if profile.pinned_cert_hash else None
        ),
        intervals=len(profile.uptime_log),
        online_seconds=provider.online_seconds(profile),
        uptime_log=[[start, end] for start, end in profile.uptime_log],
        event_kinds=profile.event_kinds(),
    )


def create_app(lab: Optional[Lab] = None) -> FastAPI:
    app = FastAPI(title="anonymous hosting lab", version=__version__)
    app.state.lab = lab or Lab()

    @app.exception_handler(TeevaultError)
    async def teevault_error(_req: Request, exc: TeevaultError):
        status = 500
        for cls, code in _STATUS_BY_ERROR:
            if isinstance(exc, cls):
                status = code
                break
        body = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, PartialFailure):
            body["applied"] = exc.applied
            body["failed"] = exc.failed
        return JSONResponse(status_code=status, content=body)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    # --- vaults ---------------------------------------------------------

    @app.post("/vaults", response_model=schemas.VaultInfo, status_code=201)
    def create_vault(req: schemas.VaultCreateRequest):
        lab: Lab = app.state.lab
        config = vault.VaultConfig(
            storage_root=req.storage_root,
            ram_limit_bytes=req.ram_limit_bytes,
            disk_limit_bytes=req.disk_limit_bytes,
            bandwidth_bytes_per_sec=req.bandwidth_bytes_per_sec,
            bandwidth_burst_bytes=req.bandwidth_burst_bytes,
            submission_cap_bytes=req.submission_cap_bytes,
            allowed_capabilities=tuple(req.allowed_capabilities),
            record_traffic=req.record_traffic,
        )
        with lab.lock:
            daemon = vault.VaultDaemon(config, lab.registry)
            daemon.advertise_vchs()
            vault_id = lab.next_id("vault")
            lab.vaults[vault_id] = daemon
        return _vault_info(vault_id, daemon)

    @app.get("/vaults", response_model=list[schemas.VaultInfo])
    def list_vaults():
        lab: Lab = app.state.lab
        return [_vault_info(vid, d) for vid, d in lab.vaults.items()]

    @app.get("/vaults/{vault_id}", response_model=schemas.VaultInfo)
    def get_vault(vault_id: str):
        lab: Lab = app.state.lab
        return _vault_info(vault_id, lab.vault_or_404(vault_id))

    @app.get("/vaults/{vault_id}/decisions", response_model=schemas.DecisionsResponse)
    def vault_decisions(vault_id: str):
        lab: Lab = app.state.lab
        daemon = lab.vault_or_404(vault_id)
        return schemas.DecisionsResponse(
            vault_id=vault_id,
            decisions=[schemas.DecisionEntry(**d) for d in daemon.decisions()],
        )

    @app.delete("/vaults/{vault_id}", status_code=204)
    def delete_vault(vault_id: str):
        lab: Lab = app.state.lab
        daemon = lab.vault_or_404(vault_id)
        with lab.lock:
            daemon.close()
            del lab.vaults[vault_id]

    # --- providers ------------------------------------------------------

    @app.post("/providers", response_model=schemas.ProviderInfo, status_code=201)
    def create_provider(req: schemas.ProviderCreateRequest):
        lab: Lab = app.state.lab
        daemon = lab.vault_or_404(req.vault_id)
        profile = provider.create_profile(
            req.auth_secret.encode("utf-8"),
            vault_vchs=daemon.vchs_onion or daemon.advertise_vchs(),
            attest=req.attest,
            bind_port=req.bind_port,
            max_staleness_seconds=req.max_staleness_seconds,
            capabilities=tuple(req.capabilities),
        )
        with lab.lock:
            provider_id = lab.next_id("provider")
            lab.providers[provider_id] = profile
        return _provider_info(provider_id, profile)

    @app.get("/providers/{provider_id}", response_model=schemas.ProviderInfo)
    def get_provider(provider_id: str):
        lab: Lab = app.state.lab
        return _provider_info(provider_id, lab.provider_or_404(provider_id))

    @app.post(
        "/providers/{provider_id}/bootstrap",
        response_model=schemas.AdvertisementResponse,
    )
    def provider_bootstrap(provider_id: str, req: schemas.BootstrapRequest):
        lab: Lab = app.state.lab
        profile = lab.provider_or_404(provider_id)
        content = {path: unb64(body) for path, body in req.content.items()}
        ad = provider.bootstrap(
            profile,
            lab.registry,
            content=content,
            circuit=_circuit(req.circuit),
            shielded=req.shielded,
        )
        lab.pins.import_advertisement(ad, replace=True)
        return schemas.AdvertisementResponse(onion_url=ad.onion_url, cert_hash=ad.cert_hash)

    @app.post("/providers/{provider_id}/update", response_model=schemas.UpdateResponse)
    def provider_update(provider_id: str, req: schemas.UpdateRequest):
        lab: Lab = app.state.lab
        profile = lab.provider_or_404(provider_id)
        changes = []
        for change in req.changes:
            if change.action == "upload":
                if change.data is None:
                    raise SubmissionRejected(f"upload of {change.path} carries no data")
                changes.append(("upload", change.path, unb64(change.data)))
            elif change.action == "remove":
                changes.append(("remove", change.path))
            else:
                raise SubmissionRejected(f"unknown change action {change.action!r}")
        receipt = provider.update_content(
            profile, lab.registry, changes, circuit=_circuit(req.circuit)
        )
        return schemas.UpdateResponse(applied=receipt["applied"])

    @app.post(
        "/providers/{provider_id}/export-keys", response_model=schemas.KeyBundleResponse
    )
    def provider_export_keys(provider_id: str):
        lab: Lab = app.state.lab
        profile = lab.provider_or_404(provider_id)
        bundle = provider.export_keys(profile, lab.registry)
        return schemas.KeyBundleResponse(bundle=b64(bundle))

    @app.post(
        "/providers/{provider_id}/import-keys", response_model=schemas.ImportKeysResponse
    )
    def provider_import_keys(provider_id: str, req: schemas.ImportKeysRequest):
        lab: Lab = app.state.lab
        profile = lab.provider_or_404(provider_id)
        receipt = provider.import_keys(
            profile, lab.registry, unb64(req.bundle), circuit=_circuit(req.circuit)
        )
        lab.pins.import_advertisement(
            provider.Advertisement(receipt["onion_url"], receipt["cert_hash"]),
            replace=True,
        )
        return schemas.ImportKeysResponse(**receipt)

    # --- pins and fetches --------------------------------------------------

    @app.post("/pins", response_model=schemas.PinListResponse)
    def import_pin(req: schemas.PinImportRequest):
        lab: Lab = app.state.lab
        lab.pins.import_advertisement(
            provider.Advertisement(req.onion_url, req.cert_hash), replace=req.replace
        )
        return list_pins()

    @app.get("/pins", response_model=schemas.PinListResponse)
    def list_pins():
        lab: Lab = app.state.lab
        return schemas.PinListResponse(
            pins={url: digest.hex() for url, digest in lab.pins.pins.items()}
        )

    @app.post("/fetch", response_model=schemas.FetchResponse)
    def do_fetch(req: schemas.FetchRequest):
        lab: Lab = app.state.lab
        if req.pin_cert_hash is not None:
            pins = client.PinStore({req.url: bytes.fromhex(req.pin_cert_hash)})
        else:
            pins = lab.pins
        result = client.fetch(
            lab.registry, req.url, req.path, pins, profile=_circuit(req.circuit)
        )
        return schemas.FetchResponse(
            status=result.status,
            body=b64(result.body),
            body_sha256=result.body_sha256,
            cert_hash=result.cert_hash.hex(),
            connect_ms=result.connect_ms,
            ttfb_ms=result.ttfb_ms,
            ttlb_ms=result.ttlb_ms,
            stale=result.stale,
        )

    return app
