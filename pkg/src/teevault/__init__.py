"""TEE-backed anonymous hosting, simulated at desk scale.

The package models the full trust chain of an enclave-hosted onion
service: code measurement and remote attestation, sealed storage, a
request-handling host program, a vault daemon that enforces isolation,
provider bootstrap tooling, a pinning client, and a latency benchmark
harness. Everything runs in-process against a simulated Tor transport;
no real enclave hardware or Tor network is involved.
"""

__version__ = "0.1.0"
