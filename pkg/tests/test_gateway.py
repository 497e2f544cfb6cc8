import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airmesh.clock import VirtualClock
from airmesh.gateway import ROUTES, Gateway, GatewayServer, HttpClient, RateLimiter, Request, Route, parse_selection, project, BadSelection
from airmesh.services import AirSystem, SystemConfig
from airmesh.services.fixtures import user_password
from airmesh.services.trips import TRIP_SCHEMA


@pytest.fixture(scope="module")
def system():
    return AirSystem(SystemConfig(n_flights=30, n_users=50, rate_capacity=10**6, rate_refill=10**6), VirtualClock())


def token_for(system, user, scopes=None):
    password = "admin-pw" if user == "admin" else user_password(user)
    return system.auth.issue(user, password, scopes).access_token


def call(system, method, path, token=None, body=None, **kw):
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    return system.gateway.dispatch(Request(method, path, headers, body, **kw))


def book(system, user, token, seats=1, flight=None):
    flight = flight or system.fixtures.flights[0]["flight_id"]
    return call(system, "POST", "/v1/bookings", token, {"flight_id": flight, "seats": seats})


# -- routing and check order


def test_public_search_needs_no_token(system):
    f = system.fixtures.flights[0]
    r = call(system, "GET", f"/v1/flights?origin={f['origin']}&destination={f['destination']}&date={f['date']}")
    assert r.status == 200
    assert f["flight_id"] in {x["flight_id"] for x in r.body}


def test_missing_and_bad_tokens_are_401(system):
    assert call(system, "GET", "/v1/bookings").status == 401
    assert call(system, "GET", "/v1/bookings", "not.a.token").status == 401
    good = token_for(system, "u0001")
    head, payload, sig = good.split(".")
    assert call(system, "GET", "/v1/bookings", f"{head}.{payload}.{sig[::-1]}").status == 401


def test_unknown_path_401_without_token_404_with(system):
    assert call(system, "GET", "/v1/nowhere").status == 401
    assert call(system, "GET", "/v1/nowhere", token_for(system, "u0001")).status == 404


def test_insufficient_scope_is_403(system):
    t = token_for(system, "u0001", ["booking.read"])
    assert book(system, "u0001", t).status == 403
    assert call(system, "GET", "/v1/bookings", t).status == 200


def test_expired_token_is_401():
    clock = VirtualClock()
    s = AirSystem(SystemConfig(n_flights=5, n_users=5), clock)
    t = token_for(s, "u0001")
    clock.advance(901)
    assert call(s, "GET", "/v1/bookings", t).status == 401


def test_rate_limit_is_checked_first():
    s = AirSystem(SystemConfig(n_flights=5, n_users=5, rate_capacity=2, rate_refill=1), VirtualClock())
    statuses = [call(s, "GET", "/v1/nowhere", source="9.9.9.9").status for _ in range(3)]
    assert statuses == [401, 401, 429]


def test_rejections_have_no_side_effects(system):
    before = system.digests()
    forwarded = dict(system.gateway.forwarded)
    t_read = token_for(system, "u0002", ["booking.read"])
    flight = system.fixtures.flights[1]["flight_id"]
    for token in (None, "garbage", t_read):
        r = call(system, "POST", "/v1/bookings", token, {"flight_id": flight, "seats": 1})
        assert r.status in (401, 403)
    assert system.digests() == before
    assert system.gateway.forwarded == forwarded


def test_route_table_is_unambiguous():
    with pytest.raises(ValueError, match="ambiguous"):
        Gateway(AirSystem(SystemConfig(n_flights=1, n_users=1), VirtualClock()),
                routes=ROUTES + (Route("GET", "/v1/flights/search", "flights", None),))


def test_route_match_params():
    r = Route("GET", "/v1/users/{user_id}", "profiles", "profile.read")
    assert r.match("GET", ["v1", "users", "u1"]) == {"user_id": "u1"}
    assert r.match("PUT", ["v1", "users", "u1"]) is None
    assert r.match("GET", ["v1", "users", ""]) is None


# -- bookings and ownership


def test_booking_created_and_readable(system):
    t = token_for(system, "u0003")
    r = book(system, "u0003", t, seats=2)
    assert r.status == 201 and r.body["status"] == "Confirmed"
    assert r.body["booking_id"] == f"bk-{r.correlation_id}"
    got = call(system, "GET", f"/v1/bookings/{r.body['booking_id']}", t)
    assert got.status == 200 and got.body["seats"] == 2
    pay = call(system, "GET", f"/v1/payments/{got.body['payment_id']}", t)
    assert pay.status == 200 and pay.body["status"] == "Charged"


def test_booking_validation(system):
    t = token_for(system, "u0003")
    assert call(system, "POST", "/v1/bookings", t, {"seats": 1}).status == 400
    assert book(system, "u0003", t, seats=0).status == 400
    assert book(system, "u0003", t, flight="FL9999").status == 404
    assert call(system, "POST", "/v1/bookings", t, "[1]").status == 400


def test_rejected_and_compensated_codes():
    s = AirSystem(SystemConfig(n_users=5, payment_fail_prob=1.0, flights=[
        {"flight_id": "F1", "origin": "A", "destination": "B", "date": "2026-11-01", "departure_ts": 0, "capacity": 1, "price": 100}]),
        VirtualClock())
    t = token_for(s, "u0001")
    assert book(s, "u0001", t, flight="F1").status == 402
    assert book(s, "u0001", t, seats=2, flight="F1").status == 409


def test_same_correlation_id_is_idempotent(system):
    t = token_for(system, "u0004")
    flight = system.fixtures.flights[2]["flight_id"]
    before = system.flights.availability(flight)
    headers = {"Authorization": f"Bearer {t}", "X-Correlation-Id": "retry-1"}
    rs = [system.gateway.dispatch(Request("POST", "/v1/bookings", headers, {"flight_id": flight})) for _ in range(2)]
    assert [r.status for r in rs] == [201, 201]
    assert rs[0].body == rs[1].body
    assert system.flights.availability(flight) == before - 1


def test_ownership_enforced_and_admin_allowed(system):
    owner = token_for(system, "u0005")
    other = token_for(system, "u0006")
    bid = book(system, "u0005", owner).body["booking_id"]
    assert call(system, "GET", f"/v1/bookings/{bid}", other).status == 403
    assert call(system, "GET", "/v1/users/u0005", other).status == 403
    assert call(system, "GET", "/v1/trips/u0005", other).status == 403
    assert call(system, "POST", "/v1/bookings", other, {"flight_id": "FL0000", "user_id": "u0005"}).status == 403
    admin = token_for(system, "admin")
    assert call(system, "GET", f"/v1/bookings/{bid}", admin).status == 200
    assert call(system, "GET", "/v1/trips/u0005", admin).status == 200


def test_profile_update_via_gateway(system):
    t = token_for(system, "u0007")
    r = call(system, "PUT", "/v1/users/u0007", t, {"preferences": {"notify_sms": True}})
    assert r.status == 200 and r.body["preferences"]["notify_sms"] is True
    assert "credential_hash" not in call(system, "GET", "/v1/users/u0007", t).body


def test_downstream_exception_is_502(system, monkeypatch):
    def boom(_):
        raise RuntimeError("db down")

    monkeypatch.setattr(system.flights, "get_flight", boom)
    assert call(system, "GET", "/v1/flights/FL0001").status == 502


def test_deferred_booking_returns_flow(system):
    t = token_for(system, "u0008")
    headers = {"Authorization": f"Bearer {t}"}
    r = system.gateway.dispatch(Request("POST", "/v1/bookings", headers, {"flight_id": "FL0003"}, defer=True))
    assert r.status == 202 and r.flow is not None
    assert r.body["status"] == "Pending"
    final = system.gateway.booking_response(r.flow.run(), r.correlation_id)
    assert final.status == 201
    assert system.bookings.get_booking(r.body["booking_id"])["status"] == "Confirmed"


# -- token endpoint


def test_token_grants(system):
    r = call(system, "POST", "/v1/auth/token", body={"grant_type": "password", "username": "u0009", "password": user_password("u0009")})
    assert r.status == 200 and r.body["token_type"] == "Bearer"
    r2 = call(system, "POST", "/v1/auth/token", body={"grant_type": "refresh_token", "refresh_token": r.body["refresh_token"]})
    assert r2.status == 200
    again = call(system, "POST", "/v1/auth/token", body={"grant_type": "refresh_token", "refresh_token": r.body["refresh_token"]})
    assert again.status == 401
    c = call(system, "POST", "/v1/auth/token", body={"grant_type": "client_credentials", "client_id": "svc-reporting", "client_secret": "svc-reporting-secret"})
    assert c.status == 200 and "refresh_token" not in c.body
    assert call(system, "POST", "/v1/auth/token", body={"grant_type": "password", "username": "u0009", "password": "x"}).status == 401
    assert call(system, "POST", "/v1/auth/token", body={"grant_type": "magic"}).status == 400
    assert call(system, "POST", "/v1/auth/token", body={"grant_type": "password", "username": "u0009"}).status == 400
    over = {"grant_type": "password", "username": "u0009", "password": user_password("u0009"), "scope": ["admin"]}
    assert call(system, "POST", "/v1/auth/token", body=over).status == 403


# -- rate limiter


def test_bucket_admits_capacity_then_denies():
    clock = VirtualClock()
    rl = RateLimiter(clock, 100, 100)
    assert sum(rl.check("c") for _ in range(100)) == 100
    assert not rl.check("c")
    clock.advance(0.01)
    assert rl.check("c")
    assert not rl.check("c")
    assert rl.check("other")


def test_bucket_reports_level():
    clock = VirtualClock()
    rl = RateLimiter(clock, 100, 100)
    for _ in range(40):
        rl.check("c")
    clock.advance(0.1)
    assert rl.bucket("c").tokens == pytest.approx(70)


def oracle_admitted(capacity, rate, arrivals_s):
    """Token bucket on exact rationals."""
    tokens, last, ok = Fraction(capacity), Fraction(0), 0
    for t in arrivals_s:
        tokens = min(Fraction(capacity), tokens + (t - last) * rate)
        last = t
        if tokens >= 1:
            tokens -= 1
            ok += 1
    return ok


def test_saturated_bucket_admits_rate_times_window():
    clock = VirtualClock()
    rl = RateLimiter(clock, 100, 100)
    while rl.check("c"):
        pass
    step = Fraction(1, 2000)  # offered load 2000 req/s, 20x the refill rate
    arrivals = [step * (i + 1) for i in range(20_000)]
    admitted = 0
    prev = Fraction(0)
    for t in arrivals:
        clock.advance_ns(int((t - prev) * 1_000_000_000))
        prev = t
        admitted += rl.check("c")
    expected = oracle_admitted(100, 100, [Fraction(0)] * 101 + arrivals) - 100
    assert admitted == expected
    assert abs(admitted - 1000) <= 2


def test_fresh_bucket_admits_burst_plus_refill():
    clock = VirtualClock()
    rl = RateLimiter(clock, 100, 100)
    admitted = 0
    for _ in range(20_000):
        clock.advance_ns(500_000)
        admitted += rl.check("c")
    assert abs(admitted - 1100) <= 2


# -- aggregation


@pytest.fixture(scope="module")
def traveller(system):
    t = token_for(system, "u0010")
    for flight in ("FL0004", "FL0005", "FL0004"):
        assert book(system, "u0010", t, flight=flight).status == 201
    system.quiesce()
    return system.auth.verify(t), t


def test_full_selection_equals_direct_calls(system, traveller):
    claims, _ = traveller
    assert system.gateway.aggregate("u0010", None, claims) == system.get_trip("u0010")


def test_projection_and_query_param(system, traveller):
    _, t = traveller
    select = json.dumps({"bookings": ["booking_id", "status"], "flights": ["flight_id"]})
    r = call(system, "GET", "/v1/trips/u0010", t, query={"select": select})
    assert r.status == 200
    assert set(r.body) == {"bookings", "flights"}
    assert all(set(b) == {"booking_id", "status"} for b in r.body["bookings"])
    assert [f["flight_id"] for f in r.body["flights"]] == ["FL0004", "FL0005"]


@pytest.mark.parametrize("bad", [{}, [], {"nope": ["x"]}, {"profile": []}, {"profile": ["nope"]}, {"profile": "name"}])
def test_bad_selection(system, traveller, bad):
    with pytest.raises(BadSelection):
        parse_selection(bad)
    _, t = traveller
    assert call(system, "GET", "/v1/trips/u0010", t, query={"select": json.dumps(bad)}).status == 400


selections = st.dictionaries(
    st.sampled_from(sorted(TRIP_SCHEMA)),
    st.just(None),
    min_size=1,
).flatmap(
    lambda d: st.fixed_dictionaries({s: st.lists(st.sampled_from(TRIP_SCHEMA[s]), min_size=1, unique=True) for s in d})
)


@settings(max_examples=60, deadline=None)
@given(selections)
def test_random_selection_matches_projection_of_full_trip(system, traveller, selection):
    claims, _ = traveller
    full = system.get_trip("u0010")
    got = system.gateway.aggregate("u0010", selection, claims)
    assert set(got) == set(selection)
    for section, fields in selection.items():
        assert got[section] == project(full[section], tuple(fields))


def test_failing_section_is_marked(system, traveller, monkeypatch):
    claims, _ = traveller

    def broken(_):
        raise ConnectionError("flights down")

    monkeypatch.setattr(system.trips, "booked_flights", broken)
    got = system.gateway.aggregate("u0010", None, claims)
    assert "error" in got["flights"]
    assert got["bookings"] == system.trips.user_bookings("u0010")
    assert got["profile"]["user_id"] == "u0010"


def test_trip_unknown_user_is_404(system):
    assert call(system, "GET", "/v1/trips/nobody", token_for(system, "admin")).status == 404


# -- HTTP transport


def test_http_round_trip(system):
    server = GatewayServer(system.gateway).start()
    client = HttpClient(*server.address)
    try:
        t = token_for(system, "u0011")
        r = client.dispatch(Request("POST", "/v1/bookings", {"Authorization": f"Bearer {t}", "X-Correlation-Id": "http-1"}, {"flight_id": "FL0006"}))
        assert r.status == 201 and r.correlation_id == "http-1"
        assert r.body["booking_id"] == "bk-http-1"
        assert client.dispatch(Request("GET", "/v1/bookings/bk-http-1")).status == 401
        ok = client.dispatch(Request("GET", "/v1/flights", query={"origin": "X"}))
        assert ok.status == 200 and ok.body == []
    finally:
        client.close()
        server.stop()
