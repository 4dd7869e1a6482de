"""Signature algorithm allow-list and the raw sign/verify primitives.

Only three schemes are ever accepted: HMAC-SHA-256 (``HS256``), RSASSA
PKCS#1 v1.5 with SHA-256 (``RS256``) and ECDSA P-256 with SHA-256
(``ES256``).  Anything else, including every spelling of ``none``, is
rejected by the callers in :mod:`tokenguard.token_core`.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import secrets

from cryptography.exceptions import InvalidSignature as _CryptoInvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from .errors import UnsupportedAlgorithm

HS256 = "HS256"
RS256 = "RS256"
ES256 = "ES256"

ALLOWED_ALGORITHMS = (HS256, RS256, ES256)
SYMMETRIC_ALGORITHMS = frozenset({HS256})

# One active key per family; each algorithm is its own family.
FAMILY = {HS256: "HS", RS256: "RS", ES256: "ES"}

DEFAULT_ALGORITHM = ES256

_HMAC_KEY_BYTES = 32
_RSA_BITS = 2048
_ES256_COORD_BYTES = 32


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Lenient decoder for trusted, locally produced material."""
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def check_algorithm(alg: str) -> str:
    if alg not in ALLOWED_ALGORITHMS:
        raise UnsupportedAlgorithm(alg)
    return alg


def generate_material(alg: str, secret: bytes | None = None):
    """Return ``(private, public)`` key objects for ``alg``.

    For HS256 the private half is the raw secret bytes and the public half
    is ``None``.  ``secret`` lets callers plant known HMAC bytes.
    """
    check_algorithm(alg)
    if alg == HS256:
        return (secret if secret is not None else secrets.token_bytes(_HMAC_KEY_BYTES)), None
    if secret is not None:
        raise UnsupportedAlgorithm(f"{alg} does not take raw secret bytes")
    if alg == RS256:
        private = rsa.generate_private_key(public_exponent=65537, key_size=_RSA_BITS)
    else:
        private = ec.generate_private_key(ec.SECP256R1())
    return private, private.public_key()


def sign(alg: str, private, data: bytes) -> bytes:
    if alg == HS256:
        return hmac.new(private, data, hashlib.sha256).digest()
    if alg == RS256:
        return private.sign(data, padding.PKCS1v15(), hashes.SHA256())
    if alg == ES256:
        der = private.sign(data, ec.ECDSA(hashes.SHA256()))
        r, s = decode_dss_signature(der)
        return r.to_bytes(_ES256_COORD_BYTES, "big") + s.to_bytes(_ES256_COORD_BYTES, "big")
    raise UnsupportedAlgorithm(alg)


def verify(alg: str, private, public, data: bytes, signature: bytes) -> bool:
    """Constant-time where the primitive allows it; never raises on bad input."""
    if alg == HS256:
        if private is None:
            return False
        return hmac.compare_digest(hmac.new(private, data, hashlib.sha256).digest(), signature)
    try:
        if alg == RS256:
            public.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
            return True
        if alg == ES256:
            if len(signature) != 2 * _ES256_COORD_BYTES:
                return False
            r = int.from_bytes(signature[:_ES256_COORD_BYTES], "big")
            s = int.from_bytes(signature[_ES256_COORD_BYTES:], "big")
            public.verify(encode_dss_signature(r, s), data, ec.ECDSA(hashes.SHA256()))
            return True
    except (_CryptoInvalidSignature, ValueError):
        return False
    return False


def public_jwk(alg: str, public) -> dict | None:
    """JWK rendering of the public half (``None`` for symmetric keys)."""
    if public is None:
        return None
    if alg == RS256:
        numbers = public.public_numbers()
        n_len = (numbers.n.bit_length() + 7) // 8
        return {
            "kty": "RSA",
            "n": b64url_encode(numbers.n.to_bytes(n_len, "big")),
            "e": b64url_encode(numbers.e.to_bytes((numbers.e.bit_length() + 7) // 8, "big")),
        }
    numbers = public.public_numbers()
    return {
        "kty": "EC",
        "crv": "P-256",
        "x": b64url_encode(numbers.x.to_bytes(_ES256_COORD_BYTES, "big")),
        "y": b64url_encode(numbers.y.to_bytes(_ES256_COORD_BYTES, "big")),
    }


def public_from_jwk(alg: str, jwk: dict):
    check_algorithm(alg)
    if alg == RS256:
        n = int.from_bytes(b64url_decode(jwk["n"]), "big")
        e = int.from_bytes(b64url_decode(jwk["e"]), "big")
        return rsa.RSAPublicNumbers(e, n).public_key()
    if alg == ES256:
        x = int.from_bytes(b64url_decode(jwk["x"]), "big")
        y = int.from_bytes(b64url_decode(jwk["y"]), "big")
        return ec.EllipticCurvePublicNumbers(x, y, ec.SECP256R1()).public_key()
    raise UnsupportedAlgorithm(f"{alg} has no public form")


def export_private(alg: str, private) -> str:
    if alg == HS256:
        return b64url_encode(private)
    pem = private.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    return pem.decode("ascii")


def import_private(alg: str, text: str):
    """Inverse of :func:`export_private`; returns ``(private, public)``."""
    if alg == HS256:
        return b64url_decode(text), None
    private = serialization.load_pem_private_key(text.encode("ascii"), password=None)
    return private, private.public_key()
