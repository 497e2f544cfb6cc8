"""Token service: password / client-credentials grants, HS256 JWTs, refresh rotation."""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import random
import threading
from dataclasses import dataclass, field
from typing import Protocol

from .clock import NS_PER_S, Clock, RealClock

ACCESS_TTL_S = 900
REFRESH_TTL_S = 24 * 3600
HEADER = {"alg": "HS256", "typ": "JWT"}


class AuthError(Exception):
    code = "auth_error"


class Unauthorized(AuthError):
    code = "unauthorized"


class ForbiddenScope(AuthError):
    code = "forbidden_scope"


class BadSignature(AuthError):
    code = "bad_signature"


class Expired(AuthError):
    code = "expired"


class InsufficientScope(AuthError):
    code = "insufficient_scope"


class Revoked(AuthError):
    code = "revoked"


class Unknown(AuthError):
    code = "unknown"


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not isinstance(text, str) or any(c not in _B64URL for c in text) or len(text) % 4 == 1:
        raise ValueError("not base64url")
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


_B64URL = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_")


def _compact(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sign(secret: bytes, signing_input: bytes) -> bytes:
    return hmac.new(secret, signing_input, hashlib.sha256).digest()


def encode_token(secret: bytes, claims: dict) -> str:
    signing_input = f"{b64url_encode(_compact(HEADER))}.{b64url_encode(_compact(claims))}".encode()
    return f"{signing_input.decode()}.{b64url_encode(sign(secret, signing_input))}"


def decode_token(secret: bytes, token: str) -> dict:
    """Check structure and signature; return the claims. Raises BadSignature."""
    try:
        head_b64, claims_b64, sig_b64 = token.split(".")
        signature = b64url_decode(sig_b64)
        # canonical encodings only: re-encoding must reproduce the segment exactly
        if b64url_encode(signature) != sig_b64:
            raise ValueError("non-canonical signature")
        expected = sign(secret, f"{head_b64}.{claims_b64}".encode())
        if not hmac.compare_digest(signature, expected):
            raise ValueError("signature mismatch")
        header = json.loads(b64url_decode(head_b64))
        claims = json.loads(b64url_decode(claims_b64))
    except (ValueError, AttributeError, UnicodeDecodeError) as exc:
        raise BadSignature(str(exc)) from None
    if header != HEADER or not isinstance(claims, dict):
        raise BadSignature("unexpected header")
    return claims


def unverified_subject(secret: bytes, token: str) -> str | None:
    """Subject of a correctly signed token regardless of expiry, else None."""
    try:
        return decode_token(secret, token).get("sub")
    except BadSignature:
        return None


def hash_password(password: str, salt: str) -> str:
    return hashlib.sha256(f"{salt}:{password}".encode()).hexdigest()


@dataclass(frozen=True)
class Claims:
    sub: str
    iat: int
    exp: int
    scope: tuple[str, ...]
    jti: str

    def as_dict(self) -> dict:
        return {"sub": self.sub, "iat": self.iat, "exp": self.exp, "scope": list(self.scope), "jti": self.jti}

    @classmethod
    def from_dict(cls, d: dict) -> Claims:
        try:
            return cls(str(d["sub"]), int(d["iat"]), int(d["exp"]), tuple(d["scope"]), str(d["jti"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise BadSignature(f"malformed claims: {exc}") from None


@dataclass
class RefreshRecord:
    refresh_id: str
    sub: str
    scopes: tuple[str, ...]
    expires: int  # clock ns
    revoked: bool = False
    successor: str | None = None


@dataclass(frozen=True)
class TokenPair:
    access_token: str
    refresh_token: str | None
    expires_in: int
    claims: Claims

    def as_response(self) -> dict:
        body = {"access_token": self.access_token, "token_type": "Bearer", "expires_in": self.expires_in}
        if self.refresh_token is not None:
            body["refresh_token"] = self.refresh_token
        return body


class CredentialDirectory(Protocol):
    def credentials(self, principal: str) -> tuple[str, str, tuple[str, ...]] | None:
        """(salt, password hash, allowed scopes) for a user or client id."""


@dataclass
class StaticDirectory:
    entries: dict[str, tuple[str, str, tuple[str, ...]]] = field(default_factory=dict)

    def add(self, principal: str, password: str, scopes, salt: str | None = None) -> None:
        salt = salt or hashlib.sha256(principal.encode()).hexdigest()[:16]
        self.entries[principal] = (salt, hash_password(password, salt), tuple(scopes))

    def credentials(self, principal: str):
        return self.entries.get(principal)


class AuthService:
    def __init__(
        self,
        secret: bytes,
        directory: CredentialDirectory,
        clock: Clock | None = None,
        seed: int | None = None,
        access_ttl: int = ACCESS_TTL_S,
        refresh_ttl: int = REFRESH_TTL_S,
    ):
        self.secret = secret
        self.directory = directory
        self.clock = clock or RealClock()
        self.access_ttl = access_ttl
        self.refresh_ttl = refresh_ttl
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._refresh: dict[str, RefreshRecord] = {}
        self._revoked: set[str] = set()
        self.issued = 0

    def _token_id(self) -> str:
        with self._lock:
            return f"{self._rng.getrandbits(128):032x}"

    def _mint(self, sub: str, scopes: tuple[str, ...], with_refresh: bool) -> TokenPair:
        now = self.clock.wall()
        iat = int(now)
        claims = Claims(sub, iat, iat + self.access_ttl, scopes, self._token_id())
        refresh_id = None
        if with_refresh:
            refresh_id = self._token_id()
            with self._lock:
                expires = self.clock.now_ns() + self.refresh_ttl * NS_PER_S
                self._refresh[refresh_id] = RefreshRecord(refresh_id, sub, scopes, expires)
        with self._lock:
            self.issued += 1
        return TokenPair(encode_token(self.secret, claims.as_dict()), refresh_id, self.access_ttl, claims)

    def _authenticate(self, principal: str, secret: str, scopes) -> tuple[str, ...]:
        record = self.directory.credentials(principal)
        if record is None:
            raise Unauthorized("unknown principal")
        salt, digest, allowed = record
        if not hmac.compare_digest(hash_password(secret, salt), digest):
            raise Unauthorized("bad credentials")
        scopes = tuple(scopes) if scopes else tuple(allowed)
        excess = [s for s in scopes if s not in allowed]
        if excess:
            raise ForbiddenScope(", ".join(excess))
        return scopes

    def issue(self, user: str, password: str, scopes=None) -> TokenPair:
        """Password grant: access token plus refresh token."""
        return self._mint(user, self._authenticate(user, password, scopes), with_refresh=True)

    def issue_client(self, client_id: str, client_secret: str, scopes=None) -> TokenPair:
        """Client-credentials grant: access token only."""
        return self._mint(client_id, self._authenticate(client_id, client_secret, scopes), with_refresh=False)

    def verify(self, token: str, required_scope: str | None = None) -> Claims:
        claims = Claims.from_dict(decode_token(self.secret, token))
        if not self.clock.wall() < claims.exp:
            raise Expired(claims.jti)
        if required_scope is not None and required_scope not in claims.scope:
            raise InsufficientScope(required_scope)
        if claims.jti in self._revoked:
            raise Revoked(claims.jti)
        return claims

    def refresh(self, refresh_id: str) -> TokenPair:
        with self._lock:
            record = self._refresh.get(refresh_id)
            if record is None:
                raise Unknown("unknown refresh token")
            if record.revoked:
                raise Revoked(refresh_id)
            if self.clock.now_ns() >= record.expires:
                raise Expired(refresh_id)
            record.revoked = True
        pair = self._mint(record.sub, record.scopes, with_refresh=True)
        with self._lock:
            record.successor = pair.refresh_token
        return pair

    def revoke(self, jti: str) -> None:
        with self._lock:
            self._revoked.add(jti)

    def refresh_record(self, refresh_id: str) -> RefreshRecord | None:
        return self._refresh.get(refresh_id)
