"""Command line: local subcommands plus thin-client flows against a lab."""

import base64
import hashlib
import json
import socket
import subprocess
import sys
import time

import httpx
import pytest
from fastapi.testclient import TestClient

from teevault import cli, tee
from teevault.errors import TeevaultError
from teevault.hp_config import parse_hp_bytes
from teevault.service import create_app


def run_cli(capsys, *argv):
    try:
        code = cli.main(list(argv))
    except SystemExit as exc:
        code = exc.code
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture()
def lab(monkeypatch):
    app = create_app()
    monkeypatch.setattr(cli, "_http", lambda server: TestClient(app))
    yield app
    app.state.lab.close()


def make_vault(app) -> dict:
    with TestClient(app) as api:
        resp = api.post("/vaults", json={})
        assert resp.status_code == 201
        return resp.json()


def write_content(tmp_path, pages: dict):
    root = tmp_path / "www"
    for rel, data in pages.items():
        file = root / rel
        file.parent.mkdir(parents=True, exist_ok=True)
        file.write_bytes(data)
    return root


class TestLocalCommands:
    def test_build_hp(self, tmp_path, capsys):
        out = tmp_path / "hp.bin"
        code, stdout, _ = run_cli(
            capsys, "provider", "build-hp", "--secret", "s3cret", "--out", str(out)
        )
        assert code == 0
        receipt = json.loads(stdout)
        hp = out.read_bytes()
        assert receipt["size_bytes"] == len(hp)
        assert receipt["measurement"] == tee.measure(hp).hex
        config = parse_hp_bytes(hp)
        assert config.password_hash == hashlib.sha256(b"s3cret").digest()

    def test_build_hp_without_secret_fails(self, capsys):
        code, stdout, stderr = run_cli(capsys, "provider", "build-hp")
        assert code == 1
        assert stdout == ""
        assert "--secret" in stderr

    def test_config_key_value_format(self, tmp_path):
        cfg = tmp_path / "vault.conf"
        cfg.write_text(
            "# a comment\n"
            "ram_limit_bytes = 1048576\n"
            "bandwidth_bytes_per_sec = 500000\n"
            "allowed_capabilities = listen, quote, seal\n"
            "backup_interval_seconds = none\n"
            "record_traffic = true\n"
            f"storage_root = {tmp_path / 'store'}\n"
        )
        config = cli.load_vault_config(cfg)
        assert config.ram_limit_bytes == 1048576
        assert config.bandwidth_bytes_per_sec == 500000.0
        assert config.allowed_capabilities == ("listen", "quote", "seal")
        assert config.backup_interval_seconds is None
        assert config.record_traffic is True
        assert config.storage_root == str(tmp_path / "store")

    def test_config_json_format(self, tmp_path):
        cfg = tmp_path / "vault.json"
        cfg.write_text(json.dumps({"disk_limit_bytes": 2048000}))
        assert cli.load_vault_config(cfg).disk_limit_bytes == 2048000

    def test_config_rejects_unknown_keys(self, tmp_path):
        cfg = tmp_path / "vault.conf"
        cfg.write_text("ram_limit = 5\n")
        with pytest.raises(TeevaultError, match="unknown"):
            cli.load_vault_config(cfg)

    def test_config_rejects_bare_lines(self, tmp_path):
        cfg = tmp_path / "vault.conf"
        cfg.write_text("just words\n")
        with pytest.raises(TeevaultError, match="key=value"):
            cli.load_vault_config(cfg)


class TestProviderAndClient:
    def test_bootstrap_fetch_update(self, lab, tmp_path, capsys):
        vchs = make_vault(lab)["vchs_onion"]
        content = write_content(
            tmp_path, {"index.html": b"<h1>hi</h1>", "img/dot.gif": b"GIF89a"}
        )
        pins = tmp_path / "pins.json"
        uptime = tmp_path / "uptime.jsonl"

        code, stdout, stderr = run_cli(
            capsys,
            "provider", "bootstrap",
            "--vault", vchs,
            "--secret", "pw",
            "--content", str(content),
            "--pin-file", str(pins),
            "--uptime-log", str(uptime),
        )
        assert code == 0, stderr
        ad = json.loads(stdout)
        assert set(ad) == {"onion_url", "cert_hash"}
        assert "provider: provider-1" in stderr

        recorded = json.loads(pins.read_text())
        assert recorded[ad["onion_url"]] == ad["cert_hash"]

        intervals = [json.loads(line) for line in uptime.read_text().splitlines()]
        assert len(intervals) == 1
        assert intervals[0]["end"] >= intervals[0]["start"]

        body_file = tmp_path / "fetched.bin"
        code, stdout, _ = run_cli(
            capsys,
            "client", "fetch",
            "--url", ad["onion_url"],
            "--path", "index.html",
            "--pin-file", str(pins),
            "--out", str(body_file),
        )
        assert code == 0
        lines = stdout.strip().splitlines()
        assert len(lines) == 1, "client fetch must print exactly one JSON line"
        result = json.loads(lines[0])
        assert list(result) == ["status", "ttfb_ms", "ttlb_ms", "stale", "body_sha256"]
        assert result["status"] == "SUCCESS"
        assert result["stale"] is False
        assert body_file.read_bytes() == b"<h1>hi</h1>"
        assert result["body_sha256"] == hashlib.sha256(b"<h1>hi</h1>").hexdigest()

        new_page = tmp_path / "new.html"
        new_page.write_bytes(b"v2")
        code, stdout, _ = run_cli(
            capsys,
            "provider", "update",
            "--provider", "provider-1",
            "--add", f"new.html={new_page}",
            "--remove", "img/dot.gif",
            "--uptime-log", str(uptime),
        )
        assert code == 0
        assert json.loads(stdout)["applied"] == ["new.html", "img/dot.gif"]
        assert len(uptime.read_text().splitlines()) == 2

        code, stdout, _ = run_cli(
            capsys,
            "client", "fetch",
            "--url", ad["onion_url"],
            "--path", "new.html",
            "--pin-file", str(pins),
        )
        assert code == 0
        assert json.loads(stdout)["body_sha256"] == hashlib.sha256(b"v2").hexdigest()

        code, _, stderr = run_cli(
            capsys,
            "client", "fetch",
            "--url", ad["onion_url"],
            "--path", "img/dot.gif",
            "--pin-file", str(pins),
        )
        assert code == 1
        assert json.loads(stderr)["error"] == "NotFound"

    def test_fetch_refuses_without_pin(self, lab, tmp_path, capsys):
        pins = tmp_path / "pins.json"
        pins.write_text("{}")
        code, stdout, stderr = run_cli(
            capsys,
            "client", "fetch",
            "--url", "ghost.onion",
            "--path", "x",
            "--pin-file", str(pins),
        )
        assert code == 1
        assert stdout == ""
        assert "no pin" in stderr

    def test_update_with_no_changes(self, lab, capsys):
        code, _, stderr = run_cli(
            capsys, "provider", "update", "--provider", "provider-1"
        )
        assert code == 1
        assert "nothing to do" in stderr

    def test_unknown_vault_address(self, lab, tmp_path, capsys):
        content = write_content(tmp_path, {"index.html": b"x"})
        code, _, stderr = run_cli(
            capsys,
            "provider", "bootstrap",
            "--vault", "missing.onion",
            "--secret", "pw",
            "--content", str(content),
        )
        assert code == 1
        assert "no vault" in stderr

    def test_export_import_keys(self, lab, tmp_path, capsys):
        vault_a = make_vault(lab)["vchs_onion"]
        vault_b = make_vault(lab)["vchs_onion"]
        content = write_content(tmp_path, {"index.html": b"same site"})
        pins = tmp_path / "pins.json"

        code, stdout, _ = run_cli(
            capsys,
            "provider", "bootstrap",
            "--vault", vault_a,
            "--secret", "pw-a",
            "--content", str(content),
            "--pin-file", str(pins),
        )
        assert code == 0
        ad_a = json.loads(stdout)

        code, stdout, _ = run_cli(
            capsys,
            "provider", "bootstrap",
            "--vault", vault_b,
            "--secret", "pw-b",
            "--content", str(content),
            "--pin-file", str(pins),
        )
        assert code == 0
        ad_b = json.loads(stdout)
        assert ad_b["cert_hash"] != ad_a["cert_hash"]

        bundle = tmp_path / "bundle.json"
        code, _, _ = run_cli(
            capsys,
            "provider", "export-keys",
            "--provider", "provider-1",
            "--out", str(bundle),
        )
        assert code == 0
        assert json.loads(bundle.read_text())["certificate"]

        code, stdout, _ = run_cli(
            capsys,
            "provider", "import-keys",
            "--provider", "provider-2",
            "--bundle", str(bundle),
            "--pin-file", str(pins),
        )
        assert code == 0
        receipt = json.loads(stdout)
        assert receipt["cert_hash"] == ad_a["cert_hash"]
        assert json.loads(pins.read_text())[ad_b["onion_url"]] == ad_a["cert_hash"]

        # the migrated identity answers at the second address
        code, stdout, _ = run_cli(
            capsys,
            "client", "fetch",
            "--url", ad_b["onion_url"],
            "--path", "index.html",
            "--pin-file", str(pins),
        )
        assert code == 0
        assert json.loads(stdout)["status"] == "SUCCESS"


class TestBenchCommand:
    def test_tiny_plan_runs(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        plan.write_text(
            json.dumps(
                {
                    "page_sizes_bytes": [512],
                    "loads_per_page": 3,
                    "fixed_circuits": 1,
                    "modes": ["Local"],
                    "seed": 7,
                    "updates": 1,
                }
            )
        )
        out = tmp_path / "results"
        code, stdout, _ = run_cli(
            capsys, "bench", "run", "--plan", str(plan), "--out", str(out)
        )
        assert code == 0
        assert "benchmark summary" in stdout
        for name in ("raw.csv", "report.json", "summary.txt"):
            assert (out / name).exists()
        report = json.loads((out / "report.json").read_text())
        assert report["plan"]["loads_per_page"] == 3

    def test_rejects_bad_plan(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({"loads_per_page": 0}))
        code, _, stderr = run_cli(
            capsys, "bench", "run", "--plan", str(plan), "--out", str(tmp_path / "r")
        )
        assert code == 1
        assert "loads_per_page" in stderr


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestServeEndToEnd:
    def test_serve_bootstrap_fetch(self, tmp_path, capsys):
        cfg = tmp_path / "vault.conf"
        cfg.write_text(
            f"storage_root = {tmp_path / 'vault-store'}\n"
            "backup_interval_seconds = none\n"
        )
        port = free_port()
        server = f"http://127.0.0.1:{port}"
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "teevault.cli",
                "vault", "serve",
                "--config", str(cfg),
                "--listen", f"127.0.0.1:{port}",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            info = json.loads(proc.stdout.readline())
            assert info["vchs_onion"].endswith(".onion")

            deadline = time.monotonic() + 15.0
            while True:
                try:
                    if httpx.get(server + "/health", timeout=1.0).status_code == 200:
                        break
                except httpx.HTTPError:
                    if time.monotonic() > deadline:
                        raise
                    time.sleep(0.1)

            content = write_content(tmp_path, {"index.html": b"served over http"})
            pins = tmp_path / "pins.json"
            code, stdout, stderr = run_cli(
                capsys,
                "provider", "bootstrap",
                "--server", server,
                "--vault", info["vchs_onion"],
                "--secret", "pw",
                "--content", str(content),
                "--pin-file", str(pins),
            )
            assert code == 0, stderr
            ad = json.loads(stdout)

            code, stdout, _ = run_cli(
                capsys,
                "client", "fetch",
                "--server", server,
                "--url", ad["onion_url"],
                "--path", "index.html",
                "--pin-file", str(pins),
            )
            assert code == 0
            result = json.loads(stdout)
            assert result["status"] == "SUCCESS"
            expected = hashlib.sha256(b"served over http").hexdigest()
            assert result["body_sha256"] == expected
        finally:
            proc.terminate()
            proc.wait(timeout=10)
