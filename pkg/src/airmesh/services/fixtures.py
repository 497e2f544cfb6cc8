"""Deterministic seeded fixture data: flights over a fixed airport set, and users."""

from __future__ import annotations

import datetime as dt
import random
from dataclasses import dataclass

AIRPORTS = (
    "DAC", "DXB", "LHR", "JFK", "SIN", "CDG", "FRA", "DOH", "IST", "BKK",
    "HKG", "NRT", "SYD", "AMS", "KUL", "DEL", "BOM", "CGK", "ICN", "YYZ",
)
FIRST_DAY = dt.date(2026, 11, 1)
DAYS = 27  # 20*19 routes x 27 days = 10,260 search keys
USER_SCOPES = ("booking.read", "booking.write", "payment.read", "profile.read", "profile.write")
ADMIN_SCOPES = USER_SCOPES + ("admin",)


@dataclass(frozen=True)
class Fixtures:
    flights: list[dict]
    users: list[dict]
    search_keys: list[tuple[str, str, str]]


def dates(days: int = DAYS) -> list[str]:
    return [(FIRST_DAY + dt.timedelta(days=i)).isoformat() for i in range(days)]


def user_password(user_id: str) -> str:
    return f"pw-{user_id}"


def generate(seed: int = 0, n_flights: int = 200, n_users: int = 1000, n_airports: int = 20) -> Fixtures:
    rng = random.Random(seed)
    airports = AIRPORTS[:n_airports]
    days = dates()
    flights = []
    for i in range(n_flights):
        origin, destination = rng.sample(airports, 2)
        day = rng.randrange(len(days))
        minute = rng.randrange(24 * 60)
        depart = dt.datetime.combine(FIRST_DAY + dt.timedelta(days=day), dt.time()) + dt.timedelta(minutes=minute)
        capacity = rng.randint(150, 400)
        flights.append(
            {
                "flight_id": f"FL{i:04d}",
                "origin": origin,
                "destination": destination,
                "date": days[day],
                "departure_ts": int(depart.replace(tzinfo=dt.timezone.utc).timestamp()),
                "capacity": capacity,
                "price": rng.randint(80, 900) * 100,
            }
        )
    first = ("Ayesha", "Rahim", "Mina", "Omar", "Lena", "Kenji", "Priya", "Tariq", "Sara", "Noah")
    last = ("Hossain", "Khan", "Smith", "Tanaka", "Garcia", "Ali", "Chen", "Novak", "Silva", "Okafor")
    users = [
        {
            "user_id": f"u{i:04d}",
            "name": f"{rng.choice(first)} {rng.choice(last)}",
            "preferences": {"seat": rng.choice(["aisle", "window"]), "sms": rng.random() < 0.3},
            "loyalty_points": rng.randrange(0, 50_000),
        }
        for i in range(n_users)
    ]
    keys = [(o, d, day) for o in airports for d in airports if o != d for day in days]
    rng.shuffle(keys)  # popularity rank order for Zipf draws
    return Fixtures(flights, users, keys)
