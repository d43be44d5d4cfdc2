"""Request and response models for the lab service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class VaultCreateRequest(BaseModel):
    storage_root: Optional[str] = None
    ram_limit_bytes: int = 64 * 1024 * 1024
    disk_limit_bytes: int = 64 * 1024 * 1024
    bandwidth_bytes_per_sec: float = 8 * 1024 * 1024.0
    bandwidth_burst_bytes: Optional[float] = None
    submission_cap_bytes: int = 1024 * 1024
    allowed_capabilities: list[str] = ["key_import", "listen", "quote", "seal"]
    record_traffic: bool = False


class ServiceInfo(BaseModel):
    service_id: str
    state: str
    shielded: bool
    onion_url: Optional[str] = None
    measurement: str
    bytes_in: int = 0
    bytes_out: int = 0
    sessions: int = 0
    ram_high_water: int = 0


class VaultInfo(BaseModel):
    vault_id: str
    vchs_onion: str
    attestation_public_key: str
    services: list[ServiceInfo] = []


class DecisionEntry(BaseModel):
    ts: float
    service: str
    direction: str
    dest: str
    verdict: str
    reason: str


class DecisionsResponse(BaseModel):
    vault_id: str
    decisions: list[DecisionEntry]


class ProviderCreateRequest(BaseModel):
    auth_secret: str = Field(min_length=1)
    vault_id: str
    attest: bool = True
    bind_port: int = 8080
    max_staleness_seconds: int = 7 * 86400
    capabilities: list[str] = ["listen", "quote", "seal"]


class ProviderInfo(BaseModel):
    provider_id: str
    vault_vchs: str
    attest: bool
    expected_measurement: str
    service_onion: Optional[str] = None
    pinned_cert_hash: Optional[str] = None
    intervals: int = 0
    online_seconds: float = 0.0
    uptime_log: list[list[float]] = []
    event_kinds: list[str] = []


class CircuitSpec(BaseModel):
    mode: str = "Local"
    hops: int = 0
    min_ms: float = 0.0
    max_ms: float = 0.0
    jitter_ms: float = 0.0


class BootstrapRequest(BaseModel):
    content: dict[str, str] = {}  # path -> base64 body
    circuit: Optional[CircuitSpec] = None
    shielded: Optional[bool] = None


class AdvertisementResponse(BaseModel):
    onion_url: str
    cert_hash: str


class ContentChange(BaseModel):
    action: str  # "upload" | "remove"
    path: str
    data: Optional[str] = None  # base64, required for upload


class UpdateRequest(BaseModel):
    changes: list[ContentChange]
    circuit: Optional[CircuitSpec] = None


class UpdateResponse(BaseModel):
    applied: list[str]


class KeyBundleResponse(BaseModel):
    bundle: str  # base64


class ImportKeysRequest(BaseModel):
    bundle: str  # base64
    circuit: Optional[CircuitSpec] = None


class ImportKeysResponse(BaseModel):
    cert_hash: str
    onion_url: str


class PinImportRequest(BaseModel):
    onion_url: str
    cert_hash: str
    replace: bool = False


class PinListResponse(BaseModel):
    pins: dict[str, str]


class FetchRequest(BaseModel):
    url: str
    path: str
    pin_cert_hash: Optional[str] = None  # falls back to the server pin store
    circuit: Optional[CircuitSpec] = None


class FetchResponse(BaseModel):
    status: str
    body: str  # base64
    body_sha256: str
    cert_hash: str
    connect_ms: float
    ttfb_ms: float
    ttlb_ms: float
    stale: bool


class ErrorBody(BaseModel):
    error: str
    detail: str
