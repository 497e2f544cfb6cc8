"""Read-only trip composition across the profile, booking, flight and payment services."""

from __future__ import annotations

from .bookings import BookingService
from .flights import FlightService
from .payments import PaymentService
from .profiles import NotFound, ProfileService

# Fields each section may expose. Anything else in a selection is rejected.
TRIP_SCHEMA: dict[str, tuple[str, ...]] = {
    "profile": ("user_id", "name", "preferences", "loyalty_points"),
    "bookings": ("booking_id", "user_id", "flight_id", "seats", "status", "payment_id", "created_ts"),
    "flights": ("flight_id", "origin", "destination", "date", "departure_ts", "capacity", "price", "seats_available"),
    "payments": ("payment_id", "booking_id", "amount", "status"),
}


class TripReader:
    def __init__(self, profiles: ProfileService, bookings: BookingService, flights: FlightService, payments: PaymentService):
        self.profiles = profiles
        self.bookings = bookings
        self.flights = flights
        self.payments = payments

    def exists(self, user_id: str) -> bool:
        return self.profiles.credentials(user_id) is not None

    def profile(self, user_id: str) -> dict:
        return self.profiles.get_profile(user_id)

    def user_bookings(self, user_id: str) -> list[dict]:
        return self.bookings.bookings_for(user_id)

    def booked_flights(self, bookings: list[dict]) -> list[dict]:
        ids = sorted({b["flight_id"] for b in bookings})
        return [self.flights.get_flight(fid) for fid in ids]

    def booking_payments(self, bookings: list[dict]) -> list[dict]:
        ids = sorted({b["payment_id"] for b in bookings if b.get("payment_id")})
        found = (self.payments.get_payment(pid) for pid in ids)
        return [p for p in found if p is not None]

    def get_trip(self, user_id: str) -> dict:
        if not self.exists(user_id):
            raise NotFound(user_id)
        bookings = self.user_bookings(user_id)
        return {
            "profile": self.profile(user_id),
            "bookings": bookings,
            "flights": self.booked_flights(bookings),
            "payments": self.booking_payments(bookings),
        }
