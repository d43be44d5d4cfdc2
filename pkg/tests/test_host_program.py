"""Host program behavior: key lifecycle, request handling, sealing."""

import json

import pytest

from teevault import certificate as certmod
from teevault import channel, tee, wire
from teevault.encoding import unb64
from teevault.errors import BackupFailed, StartupRefused
from teevault.hp_config import build_hp_bytes, default_config
from teevault.host_program import (
    CONTENT_SNAPSHOT,
    KEYS_PATH,
    PUBKEY_PATH,
    ContentStore,
    EnclaveRuntime,
    HostProgram,
    PlainRuntime,
    ServiceStorage,
    normalize_path,
    sign_request_auth,
)

SECRET = b"hunter2-but-longer"
LIMITS = tee.ResourceLimits(ram_bytes=1 << 20, disk_bytes=1 << 20)


class FakeClock:
    def __init__(self, start=1000.0):
        self.now = start

    def __call__(self):
        return self.now


def build_program(secret=SECRET, staleness=3600, capabilities=("listen", "quote", "seal"),
                  provider_public_key=None):
    cfg = default_config(
        secret,
        max_staleness_seconds=staleness,
        capabilities=capabilities,
        provider_public_key=provider_public_key,
    )
    return build_hp_bytes(cfg)


def make_hp(tmp_path, program=None, device=None, clock=None, subdir="svc", limits=LIMITS):
    program = program if program is not None else build_program()
    device = device or tee.DeviceIdentity.create()
    handle = tee.launch(device, program, limits)
    storage = ServiceStorage(tmp_path / subdir)
    hp = HostProgram(EnclaveRuntime(handle), storage, "svc.onion", clock=clock or FakeClock())
    return hp, device, storage


def auth_request(rtype, path, data=b"", auth=SECRET):
    return wire.Request(rtype, path, data, auth)


class SecureClient:
    """Drives a HostProgram through its frame interface like a remote
    peer on an established channel would."""

    def __init__(self, hp, session_id="sess-1"):
        self.hp = hp
        self.session_id = session_id
        state, hello = channel.client_hello()
        ack = hp.handle_frame(session_id, hello)
        assert ack is not None
        info = channel.parse_server_hello(ack)
        self.server_cert_hash = info.cert_hash
        self.crypto = channel.client_complete(state, info)

    def rpc(self, req: wire.Request) -> wire.Response:
        frame = self.hp.handle_frame(self.session_id, self.crypto.encrypt(wire.encode_request(req)))
        assert frame is not None
        return wire.decode_response(self.crypto.decrypt(frame))


# ---------------------------------------------------------------------------
# key lifecycle


class TestKeyLifecycle:
    def test_fresh_start_creates_sealed_key_files(self, tmp_path):
        hp, _, storage = make_hp(tmp_path)
        assert storage.read(KEYS_PATH) is not None
        assert storage.read(PUBKEY_PATH) is not None
        assert certmod.verify_certificate(hp.cert)

    def test_private_key_never_stored_plaintext(self, tmp_path):
        hp, _, storage = make_hp(tmp_path)
        private = hp.keys.private_bytes()
        for name in (KEYS_PATH, PUBKEY_PATH, CONTENT_SNAPSHOT):
            raw = storage.read(name)
            if raw is None:
                continue
            assert private not in raw
            assert private.hex().encode() not in raw

    def test_restart_reuses_keys_and_certificate(self, tmp_path):
        device = tee.DeviceIdentity.create()
        program = build_program()
        hp1, _, storage = make_hp(tmp_path, program=program, device=device)
        first_hash = hp1.cert_hash
        handle2 = tee.launch(device, program, LIMITS)
        hp2 = HostProgram(EnclaveRuntime(handle2), storage, "svc.onion", clock=FakeClock())
        assert hp2.cert_hash == first_hash
        assert hp2.keys.private_bytes() == hp1.keys.private_bytes()

    def test_corrupt_key_file_refuses_startup(self, tmp_path):
        device = tee.DeviceIdentity.create()
        program = build_program()
        _, _, storage = make_hp(tmp_path, program=program, device=device)
        raw = bytearray(storage.read(KEYS_PATH))
        raw[-1] ^= 0x01
        storage.write_atomic(KEYS_PATH, bytes(raw))
        handle2 = tee.launch(device, program, LIMITS)
        with pytest.raises(StartupRefused):
            HostProgram(EnclaveRuntime(handle2), storage, "svc.onion")

    def test_key_file_from_other_device_refuses_startup(self, tmp_path):
        program = build_program()
        _, _, storage = make_hp(tmp_path, program=program)
        other = tee.launch(tee.DeviceIdentity.create(), program, LIMITS)
        with pytest.raises(StartupRefused):
            HostProgram(EnclaveRuntime(other), storage, "svc.onion")


# ---------------------------------------------------------------------------
# quote payload


class TestQuotePayload:
    def test_quote_binds_certificate_and_measurement(self, tmp_path):
        hp, device, _ = make_hp(tmp_path)
        resp = hp.handle_request(wire.Request("client_get", "/quote"), 0.0, secure=False)
        assert resp.status == wire.SUCCESS
        payload = json.loads(resp.data)
        assert payload["attested"] is True
        cert = certmod.ServiceCertificate.from_dict(payload["certificate"])
        quote = tee.Quote.from_bytes(unb64(payload["quote"]))
        expected_rd = certmod.cert_hash(cert) + bytes(32)
        assert tee.verify_quote(
            quote,
            hp.runtime.measurement,
            device.attestation_public_key,
            expected_rd,
        )

    def test_plain_runtime_has_no_quote(self, tmp_path):
        program = build_program()
        runtime = PlainRuntime(program, LIMITS)
        hp = HostProgram(runtime, ServiceStorage(tmp_path / "plain"), "svc.onion")
        resp = hp.handle_request(wire.Request("client_get", "/quote"), 0.0, secure=False)
        payload = json.loads(resp.data)
        assert payload["attested"] is False
        assert payload["quote"] is None
        # but the certificate is still real: channels work without attestation
        cert = certmod.ServiceCertificate.from_dict(payload["certificate"])
        assert certmod.verify_certificate(cert)


# ---------------------------------------------------------------------------
# request handling (unit level, secure flag set directly)


class TestRequests:
    def test_upload_then_client_get_roundtrip(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        up = hp.handle_request(auth_request("upload", "/index.html", b"<h1>hi</h1>"), 10.0)
        assert up.status == wire.SUCCESS
        got = hp.handle_request(wire.Request("client_get", "/index.html"), 11.0)
        assert got.status == wire.SUCCESS
        assert got.data == b"<h1>hi</h1>"

    def test_wrong_secret_rejected(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(auth_request("upload", "/a", b"x", auth=b"wrong"), 0.0)
        assert resp.status == wire.FAILURE
        assert resp.detail == "BadAuth"

    def test_missing_auth_rejected_for_provider_ops(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        for rtype in ("upload", "download", "remove", "quote"):
            resp = hp.handle_request(wire.Request(rtype, "/a", b"x"), 0.0)
            assert resp.status == wire.FAILURE, rtype
            assert resp.detail == "BadAuth"

    def test_auth_on_plaintext_session_refused(self, tmp_path):
        # even a correct secret is refused outside the channel: it
        # would otherwise cross the vault unencrypted
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(auth_request("upload", "/a", b"x"), 0.0, secure=False)
        assert resp.status == wire.FAILURE
        assert resp.detail == "SecureChannelRequired"

    def test_client_get_must_not_carry_auth(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(wire.Request("client_get", "/a", b"", SECRET), 0.0)
        assert resp.status == wire.FAILURE

    def test_remove_and_not_found(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/page", b"data"), 0.0)
        assert hp.handle_request(auth_request("remove", "/page"), 1.0).status == wire.SUCCESS
        missing = hp.handle_request(wire.Request("client_get", "/page"), 2.0)
        assert missing.status == wire.FAILURE
        assert missing.detail == "NotFound"
        again = hp.handle_request(auth_request("remove", "/page"), 3.0)
        assert again.status == wire.FAILURE

    def test_provider_download_returns_content(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/page", b"data"), 0.0)
        resp = hp.handle_request(auth_request("download", "/page"), 1.0)
        assert resp.status == wire.SUCCESS and resp.data == b"data"

    def test_stale_content_served_with_warning(self, tmp_path):
        clock = FakeClock(1000.0)
        hp, _, _ = make_hp(tmp_path, clock=clock)
        hp.handle_request(auth_request("upload", "/old", b"v1"), 1000.0)
        fresh = hp.handle_request(wire.Request("client_get", "/old"), 1000.0 + 3600)
        assert fresh.status == wire.SUCCESS
        stale = hp.handle_request(wire.Request("client_get", "/old"), 1000.0 + 3601)
        assert stale.status == wire.STALE_WARNING
        assert stale.data == b"v1"
        assert "age=" in stale.detail

    def test_update_resets_staleness(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/p", b"v1"), 0.0)
        hp.handle_request(auth_request("upload", "/p", b"v2"), 5000.0)
        resp = hp.handle_request(wire.Request("client_get", "/p"), 5000.0 + 3599)
        assert resp.status == wire.SUCCESS
        assert resp.data == b"v2"

    @pytest.mark.parametrize("path", ["", "../etc", "a/../../b", "/..", "a\\b", "a\x00b", "\x07"])
    def test_hostile_paths_rejected(self, tmp_path, path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(auth_request("upload", path, b"x"), 0.0)
        assert resp.status == wire.FAILURE

    def test_path_normalization_equates_aliases(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/a/b.txt", b"x"), 0.0)
        for alias in ("a/b.txt", "//a//b.txt", "./a/./b.txt"):
            resp = hp.handle_request(wire.Request("client_get", alias), 1.0)
            assert resp.status == wire.SUCCESS, alias

    def test_reserved_paths_cannot_be_shadowed(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        for path in ("quote", "/quote", "Ppath"):
            resp = hp.handle_request(auth_request("upload", path, b"x"), 0.0)
            assert resp.status == wire.FAILURE, path

    def test_signature_auth_mode(self, tmp_path):
        provider_keys = certmod.ServiceKeyPair.generate()
        program = build_program(provider_public_key=provider_keys.public_bytes)
        hp, _, _ = make_hp(tmp_path, program=program)
        sig = sign_request_auth(provider_keys.private_bytes(), "upload", "/s", b"body")
        ok = hp.handle_request(wire.Request("upload", "/s", b"body", sig), 0.0)
        assert ok.status == wire.SUCCESS
        # signature over different data must not authorize this request
        bad = hp.handle_request(wire.Request("upload", "/s", b"tampered", sig), 0.0)
        assert bad.status == wire.FAILURE


# ---------------------------------------------------------------------------
# key export / import


class TestKeyTransfer:
    def test_export_bundle_roundtrips(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(auth_request("download", KEYS_PATH), 0.0)
        assert resp.status == wire.SUCCESS
        bundle = json.loads(resp.data)
        assert bytes.fromhex(bundle["private_key"]) == hp.keys.private_bytes()
        cert = certmod.ServiceCertificate.from_dict(bundle["certificate"])
        assert certmod.cert_hash(cert) == hp.cert_hash

    def test_export_requires_auth(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(wire.Request("download", KEYS_PATH), 0.0)
        assert resp.status == wire.FAILURE

    def test_import_rejected_without_capability(self, tmp_path):
        hp_src, _, _ = make_hp(tmp_path, subdir="src")
        bundle = hp_src.handle_request(auth_request("download", KEYS_PATH), 0.0).data
        hp_dst, _, _ = make_hp(tmp_path, subdir="dst")
        resp = hp_dst.handle_request(auth_request("upload", KEYS_PATH, bundle), 0.0)
        assert resp.status == wire.FAILURE
        assert resp.detail == "ImportRejected"

    def test_import_replaces_identity(self, tmp_path):
        hp_src, _, _ = make_hp(tmp_path, subdir="src")
        bundle = hp_src.handle_request(auth_request("download", KEYS_PATH), 0.0).data
        program = build_program(capabilities=("listen", "quote", "seal", "key_import"))
        hp_dst, device, storage = make_hp(tmp_path, program=program, subdir="dst")
        old_hash = hp_dst.cert_hash
        resp = hp_dst.handle_request(auth_request("upload", KEYS_PATH, bundle), 0.0)
        assert resp.status == wire.SUCCESS
        assert hp_dst.cert_hash == hp_src.cert_hash != old_hash
        # the new identity is re-sealed: a restart keeps it
        handle2 = tee.launch(device, program, LIMITS)
        hp_again = HostProgram(EnclaveRuntime(handle2), storage, "svc.onion")
        assert hp_again.cert_hash == hp_src.cert_hash
        # and the quote payload now attests the imported certificate
        payload = json.loads(
            hp_dst.handle_request(wire.Request("client_get", "/quote"), 0.0).data
        )
        cert = certmod.ServiceCertificate.from_dict(payload["certificate"])
        quote = tee.Quote.from_bytes(unb64(payload["quote"]))
        assert tee.verify_quote(
            quote,
            hp_dst.runtime.measurement,
            device.attestation_public_key,
            certmod.cert_hash(cert) + bytes(32),
        )

    def test_garbage_bundle_rejected(self, tmp_path):
        program = build_program(capabilities=("listen", "quote", "seal", "key_import"))
        hp, _, _ = make_hp(tmp_path, program=program)
        before = hp.cert_hash
        resp = hp.handle_request(auth_request("upload", KEYS_PATH, b"{not json"), 0.0)
        assert resp.status == wire.FAILURE
        assert hp.cert_hash == before


# ---------------------------------------------------------------------------
# persistence


class TestPersistence:
    def test_content_survives_restart(self, tmp_path):
        device = tee.DeviceIdentity.create()
        program = build_program()
        hp1, _, storage = make_hp(tmp_path, program=program, device=device)
        hp1.handle_request(auth_request("upload", "/a", b"alpha"), 100.0)
        hp1.handle_request(auth_request("upload", "/b", b"beta"), 200.0)
        handle2 = tee.launch(device, program, LIMITS)
        hp2 = HostProgram(EnclaveRuntime(handle2), storage, "svc.onion", clock=FakeClock())
        assert hp2.store.get("a").data == b"alpha"
        assert hp2.store.get("b").timestamp == 200.0
        assert hp2.restore_error is None

    def test_corrupt_snapshot_starts_empty_with_error(self, tmp_path):
        device = tee.DeviceIdentity.create()
        program = build_program()
        hp1, _, storage = make_hp(tmp_path, program=program, device=device)
        hp1.handle_request(auth_request("upload", "/a", b"alpha"), 100.0)
        raw = bytearray(storage.read(CONTENT_SNAPSHOT))
        raw[len(raw) // 2] ^= 0xFF
        storage.write_atomic(CONTENT_SNAPSHOT, bytes(raw))
        handle2 = tee.launch(device, program, LIMITS)
        hp2 = HostProgram(EnclaveRuntime(handle2), storage, "svc.onion")
        assert hp2.store.total_bytes == 0
        assert hp2.restore_error is not None

    def test_snapshot_from_other_device_starts_empty(self, tmp_path):
        # sealed data is device-bound: a copied snapshot is useless
        program = build_program()
        hp1, _, storage1 = make_hp(tmp_path, program=program, subdir="one")
        hp1.handle_request(auth_request("upload", "/a", b"alpha"), 0.0)
        storage2 = ServiceStorage(tmp_path / "two")
        storage2.write_atomic(CONTENT_SNAPSHOT, storage1.read(CONTENT_SNAPSHOT))
        handle2 = tee.launch(tee.DeviceIdentity.create(), program, LIMITS)
        hp2 = HostProgram(EnclaveRuntime(handle2), storage2, "svc.onion")
        assert hp2.store.total_bytes == 0
        assert hp2.restore_error is not None

    def test_content_not_plaintext_on_disk(self, tmp_path):
        hp, _, storage = make_hp(tmp_path)
        body = b"very-recognizable-content-marker-123"
        hp.handle_request(auth_request("upload", "/page", body), 0.0)
        raw = storage.read(CONTENT_SNAPSHOT)
        assert body not in raw

    def test_failed_backup_keeps_previous_snapshot(self, tmp_path):
        hp, device, storage = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/small", b"keepme"), 0.0)
        good = storage.read(CONTENT_SNAPSHOT)
        # bypass upload admission to force the snapshot itself over limit
        hp.store.set("huge", b"x" * (2 << 20), 1.0)
        with pytest.raises(BackupFailed):
            hp.backup()
        assert storage.read(CONTENT_SNAPSHOT) == good

    def test_oversize_upload_rejected_and_rolled_back(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        resp = hp.handle_request(auth_request("upload", "/big", b"x" * (2 << 20)), 0.0)
        assert resp.status == wire.FAILURE
        assert resp.detail.startswith("QuotaExceeded")
        assert hp.store.get("big") is None

    def test_plain_runtime_persists_without_sealing(self, tmp_path):
        program = build_program()
        storage = ServiceStorage(tmp_path / "plain")
        hp1 = HostProgram(PlainRuntime(program, LIMITS), storage, "svc.onion")
        hp1.handle_request(auth_request("upload", "/a", b"alpha"), 0.0)
        hp2 = HostProgram(PlainRuntime(program, LIMITS), storage, "svc.onion")
        assert hp2.store.get("a").data == b"alpha"


# ---------------------------------------------------------------------------
# frame layer (sessions and channels)


class TestFrameLayer:
    def test_secure_channel_end_to_end(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        client = SecureClient(hp)
        assert client.server_cert_hash == hp.cert_hash
        up = client.rpc(wire.Request("upload", "/x", b"payload", SECRET))
        assert up.status == wire.SUCCESS
        got = client.rpc(wire.Request("client_get", "/x"))
        assert got.data == b"payload"

    def test_plaintext_client_get_frame(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        hp.handle_request(auth_request("upload", "/pub", b"open"), 0.0)
        frame = hp.handle_frame("anon", wire.encode_request(wire.Request("client_get", "/pub")))
        resp = wire.decode_response(frame)
        assert resp.status == wire.SUCCESS and resp.data == b"open"

    def test_plaintext_frame_with_auth_refused(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        frame = hp.handle_frame(
            "anon", wire.encode_request(wire.Request("upload", "/x", b"d", SECRET))
        )
        resp = wire.decode_response(frame)
        assert resp.status == wire.FAILURE
        assert resp.detail == "SecureChannelRequired"

    def test_secret_absent_from_secure_frames(self, tmp_path):
        # the auth secret must be invisible to whoever carries the frames
        hp, _, _ = make_hp(tmp_path)
        state, hello = channel.client_hello()
        ack = hp.handle_frame("s", hello)
        crypto = channel.client_complete(state, channel.parse_server_hello(ack))
        out = crypto.encrypt(wire.encode_request(wire.Request("upload", "/x", b"d", SECRET)))
        for blob in (hello, ack, out):
            assert SECRET not in blob

    def test_garbage_on_established_channel_closes(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        client = SecureClient(hp)
        assert hp.handle_frame(client.session_id, b"\x00" * 40) is None

    def test_sessions_are_independent(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        a = SecureClient(hp, "sess-a")
        b = SecureClient(hp, "sess-b")
        a.rpc(wire.Request("upload", "/from-a", b"1", SECRET))
        got = b.rpc(wire.Request("client_get", "/from-a"))
        assert got.data == b"1"
        # a frame encrypted for session a is garbage on session b
        stray = a.crypto.encrypt(wire.encode_request(wire.Request("client_get", "/from-a")))
        assert hp.handle_frame("sess-b", stray) is None

    def test_close_session_forgets_state(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        client = SecureClient(hp)
        hp.close_session(client.session_id)
        # the old channel is gone; same session id starts plaintext again
        frame = hp.handle_frame(
            client.session_id, wire.encode_request(wire.Request("client_get", "/quote"))
        )
        assert wire.decode_response(frame).status == wire.SUCCESS


# ---------------------------------------------------------------------------
# small pieces


class TestPieces:
    def test_normalize_path_examples(self):
        assert normalize_path("/a/b") == "a/b"
        assert normalize_path("a//b/") == "a/b"
        assert normalize_path("./a") == "a"

    def test_content_store_accounting(self):
        store = ContentStore()
        store.set("a", b"12345", 0.0)
        store.set("b", b"123", 0.0)
        assert store.total_bytes == 8
        store.set("a", b"1", 1.0)
        assert store.total_bytes == 4
        store.remove("b")
        assert store.total_bytes == 1

    def test_snapshot_roundtrip_preserves_timestamps(self):
        store = ContentStore()
        store.set("x/y", b"\x00\xffdata", 123.5)
        restored = ContentStore.from_snapshot(
            json.loads(json.dumps(store.to_snapshot()))
        )
        entry = restored.get("x/y")
        assert entry.data == b"\x00\xffdata"
        assert entry.timestamp == 123.5

    def test_ram_accounting_counts_store(self, tmp_path):
        hp, _, _ = make_hp(tmp_path)
        base = hp.ram_used()
        hp.handle_request(auth_request("upload", "/a", b"x" * 1000), 0.0)
        assert hp.ram_used() == base + 1000
