from __future__ import annotations

import hashlib

from ..auth import hash_password
from ..cache import TtlCache, TtlClass
from ..store import DocumentStore

PRIVATE_FIELDS = ("credential_hash", "salt", "scopes")


class NotFound(Exception):
    pass


def public_view(profile: dict) -> dict:
    return {k: v for k, v in profile.items() if k not in PRIVATE_FIELDS}


class ProfileService:
    """User profiles in the document store; doubles as the credential directory for auth."""

    def __init__(self, docs: DocumentStore, cache: TtlCache):
        self.docs = docs
        self.cache = cache

    def register(self, profile: dict, password: str, scopes) -> None:
        salt = hashlib.sha256(f"salt:{profile['user_id']}".encode()).hexdigest()[:16]
        doc = {**profile, "salt": salt, "credential_hash": hash_password(password, salt), "scopes": list(scopes)}
        self.docs.doc_put("profiles", profile["user_id"], doc)

    def credentials(self, principal: str):
        doc = self.docs.doc_get("profiles", principal)
        if doc is None:
            return None
        return doc["salt"], doc["credential_hash"], tuple(doc["scopes"])

    def get_profile(self, user_id: str) -> dict:
        def load():
            doc = self.docs.doc_get("profiles", user_id)
            if doc is None:
                raise NotFound(user_id)
            return public_view(doc)

        return self.cache.get_or_load(f"profile:{user_id}", load, TtlClass.LONG)

    def update_profile(self, user_id: str, changes: dict) -> dict:
        doc = self.docs.doc_get("profiles", user_id)
        if doc is None:
            raise NotFound(user_id)
        allowed = {k: v for k, v in changes.items() if k in ("name", "preferences")}
        doc.update(allowed)
        self.docs.doc_put("profiles", user_id, doc)
        self.cache.invalidate(f"profile:{user_id}")
        return public_view(doc)

    def wants_sms(self, user_id: str) -> bool:
        try:
            return bool(self.get_profile(user_id).get("preferences", {}).get("sms"))
        except NotFound:
            return False

    def user_ids(self) -> list[str]:
        return self.docs.doc_ids("profiles")
