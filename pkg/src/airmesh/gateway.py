"""API gateway: rate limiting, bearer-token checks, routing and trip aggregation.

Checks run in a fixed order: rate limit, token, route, scope, forward. The
route is looked up before the token check only to learn whether it is public,
so an unknown path without a token is still answered 401 rather than 404.
"""

from __future__ import annotations

import http.client
import itertools
import json
import logging
import threading
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import TYPE_CHECKING, Any, Callable

from . import auth
from .clock import NS_PER_S, Clock
from .services import bookings as bk
from .services import flights as fl
from .services import profiles as pr
from .services.trips import TRIP_SCHEMA

if TYPE_CHECKING:
    from .services.system import AirSystem

log = logging.getLogger(__name__)

API_PREFIX = "/v1"
PUBLIC = None  # required_scope for routes anyone may call
ADMIN_SCOPE = "admin"

BOOKING_STATUS_CODES = {bk.CONFIRMED: 201, bk.REJECTED: 409, bk.COMPENSATED: 402, bk.STUCK: 502}


class BadRequest(Exception):
    pass


class BadSelection(BadRequest):
    pass


class Forbidden(Exception):
    pass


@dataclass
class Request:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: Any = None
    query: dict[str, str] = field(default_factory=dict)
    source: str = "127.0.0.1"
    defer: bool = False  # booking returns 202 with the flow instead of running it


@dataclass
class Response:
    status: int
    body: Any
    correlation_id: str
    flow: bk.BookingFlow | None = None

    @property
    def ok(self) -> bool:
        return self.status < 400


@dataclass(frozen=True)
class Route:
    method: str
    path_pattern: str
    target: str
    required_scope: str | None

    @property
    def segments(self) -> tuple[str, ...]:
        return tuple(self.path_pattern.strip("/").split("/"))

    def match(self, method: str, segments: list[str]) -> dict[str, str] | None:
        pattern = self.segments
        if method != self.method or len(segments) != len(pattern):
            return None
        params = {}
        for p, s in zip(pattern, segments):
            if p.startswith("{"):
                if not s:
                    return None
                params[p[1:-1]] = s
            elif p != s:
                return None
        return params

    def overlaps(self, other: Route) -> bool:
        if self.method != other.method or len(self.segments) != len(other.segments):
            return False
        return all(a == b or a.startswith("{") or b.startswith("{") for a, b in zip(self.segments, other.segments))


ROUTES = (
    Route("POST", "/v1/auth/token", "auth", PUBLIC),
    Route("GET", "/v1/flights", "flights", PUBLIC),
    Route("GET", "/v1/flights/{flight_id}", "flights", PUBLIC),
    Route("POST", "/v1/bookings", "bookings", "booking.write"),
    Route("GET", "/v1/bookings", "bookings", "booking.read"),
    Route("GET", "/v1/bookings/{booking_id}", "bookings", "booking.read"),
    Route("GET", "/v1/payments/{payment_id}", "payments", "payment.read"),
    Route("GET", "/v1/users/{user_id}", "profiles", "profile.read"),
    Route("PUT", "/v1/users/{user_id}", "profiles", "profile.write"),
    Route("GET", "/v1/trips/{user_id}", "trips", "profile.read"),
)


@dataclass
class RateLimitBucket:
    client_id: str
    capacity: float
    refill_rate: float
    tokens: float
    last_refill: int


class RateLimiter:
    """Per-client token buckets.

    Levels are kept internally as integer token-nanoseconds so that refill
    arithmetic is exact; ``bucket()`` reports them as floats.
    """

    def __init__(self, clock: Clock, capacity: float = 100.0, refill_rate: float = 100.0):
        if capacity < 1 or refill_rate <= 0:
            raise ValueError("capacity must be >= 1 and refill_rate > 0")
        self.clock = clock
        self.capacity = capacity
        self.refill_rate = refill_rate
        self._cap_units = round(capacity * NS_PER_S)
        self._rate_milli = round(refill_rate * 1000)
        self._levels: dict[str, tuple[int, int]] = {}  # client -> (units, last_ns)
        self._lock = threading.Lock()

    def _accrue(self, units: int, last: int, now: int) -> int:
        # one token is NS_PER_S units, so r tokens/s accrues r units per ns
        return min(self._cap_units, units + (now - last) * self._rate_milli // 1000)

    def check(self, client_id: str) -> bool:
        now = self.clock.now_ns()
        with self._lock:
            units, last = self._levels.get(client_id, (self._cap_units, now))
            units = self._accrue(units, last, max(now, last))
            now = max(now, last)
            if units >= NS_PER_S:
                self._levels[client_id] = (units - NS_PER_S, now)
                return True
            self._levels[client_id] = (units, now)
            return False

    def bucket(self, client_id: str) -> RateLimitBucket:
        now = self.clock.now_ns()
        with self._lock:
            units, last = self._levels.get(client_id, (self._cap_units, now))
        units = self._accrue(units, last, max(now, last))
        return RateLimitBucket(client_id, self.capacity, self.refill_rate, units / NS_PER_S, max(now, last))


# -- field selection


def parse_selection(selection: Any) -> dict[str, tuple[str, ...]]:
    """Validate a selection tree ``{"section": ["field", ...]}`` against the trip schema."""
    if selection is None:
        return dict(TRIP_SCHEMA)
    if not isinstance(selection, dict) or not selection:
        raise BadSelection("selection must be a non-empty object")
    out = {}
    for section, fields in selection.items():
        if section not in TRIP_SCHEMA:
            raise BadSelection(f"unknown section {section!r}")
        if not isinstance(fields, list) or not fields or not all(isinstance(f, str) for f in fields):
            raise BadSelection(f"section {section!r} needs a non-empty list of field names")
        unknown = [f for f in fields if f not in TRIP_SCHEMA[section]]
        if unknown:
            raise BadSelection(f"unknown field(s) {unknown} in {section!r}")
        out[section] = tuple(dict.fromkeys(fields))
    return out


def project(value: dict | list, fields: tuple[str, ...]):
    if isinstance(value, list):
        return [project(v, fields) for v in value]
    return {f: value[f] for f in fields if f in value}


class Gateway:
    def __init__(self, system: AirSystem, rate_capacity: float = 100.0, rate_refill: float = 100.0, routes=ROUTES):
        self.system = system
        self.clock = system.clock
        self.routes = tuple(routes)
        for a, b in itertools.combinations(self.routes, 2):
            if a.overlaps(b):
                raise ValueError(f"ambiguous routes {a.path_pattern} and {b.path_pattern}")
        self.limiter = RateLimiter(self.clock, rate_capacity, rate_refill)
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self.forwarded: dict[str, int] = {}
        self._handlers: dict[tuple[str, str], Callable] = {
            ("POST", "/v1/auth/token"): self._token,
            ("GET", "/v1/flights"): self._search,
            ("GET", "/v1/flights/{flight_id}"): self._flight,
            ("POST", "/v1/bookings"): self._create_booking,
            ("GET", "/v1/bookings"): self._list_bookings,
            ("GET", "/v1/bookings/{booking_id}"): self._booking,
            ("GET", "/v1/payments/{payment_id}"): self._payment,
            ("GET", "/v1/users/{user_id}"): self._get_user,
            ("PUT", "/v1/users/{user_id}"): self._put_user,
            ("GET", "/v1/trips/{user_id}"): self._trip,
        }

    # -- plumbing

    def _correlation_id(self, request: Request) -> str:
        cid = request.headers.get("X-Correlation-Id")
        if cid:
            return cid
        with self._id_lock:
            return f"c{next(self._ids):09d}"

    @staticmethod
    def _bearer(request: Request) -> str | None:
        value = request.headers.get("Authorization", "")
        if value.startswith("Bearer "):
            return value[7:].strip() or None
        return None

    def client_id(self, request: Request) -> str:
        token = self._bearer(request)
        if token is not None:
            sub = auth.unverified_subject(self.system.auth.secret, token)
            if sub is not None:
                return f"sub:{sub}"
        return f"addr:{request.source}"

    def resolve(self, method: str, path: str) -> tuple[Route | None, dict[str, str]]:
        segments = path.strip("/").split("/")
        for route in self.routes:
            params = route.match(method, segments)
            if params is not None:
                return route, params
        return None, {}

    # -- entry point

    def dispatch(self, request: Request) -> Response:
        path, _, qs = request.path.partition("?")
        query = {**dict(urllib.parse.parse_qsl(qs)), **request.query}
        cid = self._correlation_id(request)

        def reply(status: int, body: Any) -> Response:
            return Response(status, body, cid)

        if not self.limiter.check(self.client_id(request)):
            return reply(429, {"error": "rate limited"})
        route, params = self.resolve(request.method, path)
        claims = None
        if route is None or route.required_scope is not PUBLIC:
            token = self._bearer(request)
            if token is None:
                return reply(401, {"error": "missing bearer token"})
            try:
                claims = self.system.auth.verify(token)
            except auth.AuthError as exc:
                return reply(401, {"error": exc.code})
        if route is None:
            return reply(404, {"error": f"no route for {request.method} {path}"})
        if route.required_scope is not PUBLIC and route.required_scope not in claims.scope:
            return reply(403, {"error": f"scope {route.required_scope} required"})

        handler = self._handlers[(route.method, route.path_pattern)]
        with self._id_lock:
            self.forwarded[route.target] = self.forwarded.get(route.target, 0) + 1
        try:
            return handler(request, params, query, claims, cid)
        except (BadRequest, ValueError) as exc:
            return reply(400, {"error": str(exc)})
        except (fl.NotFound, pr.NotFound) as exc:
            return reply(404, {"error": f"not found: {exc}"})
        except Forbidden as exc:
            return reply(403, {"error": str(exc)})
        except auth.ForbiddenScope as exc:
            return reply(403, {"error": exc.code})
        except auth.AuthError as exc:
            return reply(401, {"error": exc.code})
        except Exception as exc:  # noqa: BLE001 - any downstream failure surfaces as 502
            log.warning("service failure on %s %s: %r", request.method, path, exc)
            return reply(502, {"error": f"service failure: {type(exc).__name__}"})

    # -- helpers

    @staticmethod
    def _is_admin(claims: auth.Claims) -> bool:
        return ADMIN_SCOPE in claims.scope

    def _owner_check(self, claims: auth.Claims, user_id: str) -> None:
        if claims.sub != user_id and not self._is_admin(claims):
            raise Forbidden("not the resource owner")

    @staticmethod
    def _body(request: Request) -> dict:
        body = request.body
        if body is None:
            return {}
        if isinstance(body, (bytes, str)):
            body = json.loads(body or "{}")
        if not isinstance(body, dict):
            raise BadRequest("body must be a JSON object")
        return body

    @staticmethod
    def _field(body: dict, name: str):
        if name not in body:
            raise BadRequest(f"missing field {name!r}")
        return body[name]

    # -- handlers

    def _token(self, request, params, query, claims, cid) -> Response:
        body = self._body(request)
        grant = body.get("grant_type")
        svc = self.system.auth
        if grant == "password":
            pair = svc.issue(self._field(body, "username"), self._field(body, "password"), body.get("scope"))
        elif grant == "client_credentials":
            pair = svc.issue_client(self._field(body, "client_id"), self._field(body, "client_secret"), body.get("scope"))
        elif grant == "refresh_token":
            pair = svc.refresh(self._field(body, "refresh_token"))
        else:
            raise BadRequest(f"unsupported grant_type {grant!r}")
        return Response(200, pair.as_response(), cid)

    def _search(self, request, params, query, claims, cid) -> Response:
        flights = self.system.flights.search_flights(query.get("origin"), query.get("destination"), query.get("date"))
        return Response(200, flights, cid)

    def _flight(self, request, params, query, claims, cid) -> Response:
        return Response(200, self.system.flights.get_flight(params["flight_id"]), cid)

    def _create_booking(self, request, params, query, claims, cid) -> Response:
        body = self._body(request)
        user_id = body.get("user_id", claims.sub)
        self._owner_check(claims, user_id)
        seats = body.get("seats", 1)
        if not isinstance(seats, int) or isinstance(seats, bool) or seats < 1:
            raise BadRequest("seats must be a positive integer")
        flight_id = self._field(body, "flight_id")
        self.system.flights.price(flight_id)  # unknown flight -> 404 before any side effect
        flow = self.system.bookings.begin_booking(user_id, flight_id, seats, booking_id=f"bk-{cid}")
        if request.defer:
            return Response(202, {"booking_id": flow.booking_id, "status": "Pending"}, cid, flow)
        return self.booking_response(flow.run(), cid)

    def booking_response(self, result: bk.BookingResult, cid: str) -> Response:
        body = {"booking_id": result.booking_id, "status": result.status}
        if result.reason:
            body["reason"] = result.reason
        return Response(BOOKING_STATUS_CODES[result.status], body, cid)

    def _list_bookings(self, request, params, query, claims, cid) -> Response:
        user_id = query.get("user_id", claims.sub)
        self._owner_check(claims, user_id)
        return Response(200, self.system.bookings.bookings_for(user_id), cid)

    def _booking(self, request, params, query, claims, cid) -> Response:
        booking = self.system.bookings.get_booking(params["booking_id"])
        if booking is None:
            raise fl.NotFound(params["booking_id"])
        self._owner_check(claims, booking["user_id"])
        return Response(200, booking, cid)

    def _payment(self, request, params, query, claims, cid) -> Response:
        payment = self.system.payments.get_payment(params["payment_id"])
        if payment is None:
            raise fl.NotFound(params["payment_id"])
        booking = self.system.bookings.get_booking(payment["booking_id"])
        self._owner_check(claims, booking["user_id"] if booking else "")
        return Response(200, payment, cid)

    def _get_user(self, request, params, query, claims, cid) -> Response:
        self._owner_check(claims, params["user_id"])
        return Response(200, self.system.profiles.get_profile(params["user_id"]), cid)

    def _put_user(self, request, params, query, claims, cid) -> Response:
        self._owner_check(claims, params["user_id"])
        return Response(200, self.system.profiles.update_profile(params["user_id"], self._body(request)), cid)

    def _trip(self, request, params, query, claims, cid) -> Response:
        selection = json.loads(query["select"]) if "select" in query else (self._body(request) or None)
        return Response(200, self.aggregate(params["user_id"], selection, claims), cid)

    # -- aggregation

    def aggregate(self, user_id: str, selection: Any, claims: auth.Claims) -> dict:
        """Compose the selected trip fields; a failing section becomes ``{"error": ...}``."""
        sel = parse_selection(selection)
        self._owner_check(claims, user_id)
        trips = self.system.trips
        if not trips.exists(user_id):
            raise pr.NotFound(user_id)

        out: dict[str, Any] = {}
        bookings: list[dict] | None = None
        booking_error = None
        if {"bookings", "flights", "payments"} & sel.keys():
            try:
                bookings = trips.user_bookings(user_id)
            except Exception as exc:  # noqa: BLE001
                booking_error = f"bookings unavailable: {type(exc).__name__}"

        loaders = {
            "profile": lambda: trips.profile(user_id),
            "bookings": lambda: bookings,
            "flights": lambda: trips.booked_flights(bookings),
            "payments": lambda: trips.booking_payments(bookings),
        }
        for section in TRIP_SCHEMA:
            if section not in sel:
                continue
            if section != "profile" and bookings is None:
                out[section] = {"error": booking_error}
                continue
            try:
                out[section] = project(loaders[section](), sel[section])
            except Exception as exc:  # noqa: BLE001 - partial result, marked per section
                out[section] = {"error": f"{section} unavailable: {type(exc).__name__}"}
        return out


# -- HTTP transport


def _http_handler(gateway: Gateway):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True  # headers and body go out as separate writes

        def _serve(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            headers = {k: v for k, v in self.headers.items()}
            # normalise the two headers the gateway reads
            for name in ("Authorization", "X-Correlation-Id"):
                for k in list(headers):
                    if k.lower() == name.lower():
                        headers[name] = headers.pop(k)
            try:
                body = json.loads(raw) if raw else None
            except json.JSONDecodeError:
                self._send(Response(400, {"error": "invalid JSON body"}, headers.get("X-Correlation-Id", "")))
                return
            response = gateway.dispatch(Request(self.command, self.path, headers, body, source=self.client_address[0]))
            self._send(response)

        def _send(self, response: Response):
            data = json.dumps(response.body, sort_keys=True).encode()
            self.send_response(response.status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("X-Correlation-Id", response.correlation_id)
            self.end_headers()
            self.wfile.write(data)

        do_GET = do_POST = do_PUT = do_DELETE = _serve

        def log_message(self, format, *args):  # noqa: A002 - signature fixed by the base class
            log.debug("%s " + format, self.client_address[0], *args)

    return Handler


class GatewayServer:
    """Loopback HTTP/1.1 front end for a gateway."""

    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _http_handler(gateway))
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> GatewayServer:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="gateway-http", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


class HttpClient:
    """Dispatches ``Request`` objects over HTTP; one keep-alive connection per thread."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._local = threading.local()

    def _conn(self) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = self._local.conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        return conn

    def dispatch(self, request: Request) -> Response:
        path = request.path
        if request.query:
            path += ("&" if "?" in path else "?") + urllib.parse.urlencode(request.query)
        data = json.dumps(request.body).encode() if request.body is not None else None
        headers = dict(request.headers)
        headers["Content-Type"] = "application/json"
        for attempt in range(2):
            conn = self._conn()
            try:
                conn.request(request.method, path, body=data, headers=headers)
                resp = conn.getresponse()
                raw = resp.read()
                break
            except (ConnectionError, http.client.HTTPException):
                conn.close()
                self._local.conn = None
                if attempt == 1:
                    raise
        body = json.loads(raw) if raw else None
        return Response(resp.status, body, resp.getheader("X-Correlation-Id", ""))

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
