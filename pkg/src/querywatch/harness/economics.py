"""What a detected attack costs the attacker, in hours, dollars or accounts."""

from __future__ import annotations

from dataclasses import dataclass

from ..detector import (BanPolicy, buffer_storage_bytes, optimal_probe_bits, optimal_probe_queries,
                        side_channel_bits, storage_cost_per_month)

PRICE_PER_1000 = 1.50  # USD, typical hosted-vision API pricing


def _nonneg(**kw):
    for name, v in kw.items():
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")


def time_bounded_hours(detections: float, buffer_hours: float) -> float:
    """Buffer holds ``buffer_hours`` of history: each detection costs a full flush."""
    _nonneg(detections=detections, buffer_hours=buffer_hours)
    return detections * buffer_hours


def query_bounded_cost(detections: float, buffer_queries: float, price_per_1000: float = PRICE_PER_1000) -> float:
    """Buffer holds the last ``buffer_queries`` queries: each detection costs that many paid queries."""
    _nonneg(detections=detections, buffer_queries=buffer_queries, price_per_1000=price_per_1000)
    return detections * buffer_queries * price_per_1000 / 1000.0


def query_cost(queries: float, price_per_1000: float = PRICE_PER_1000) -> float:
    _nonneg(queries=queries, price_per_1000=price_per_1000)
    return queries * price_per_1000 / 1000.0


def accounts_with_delay(detections: float, free_query_factor: float) -> float:
    """Accounts needed when a delayed ban lets each account run ``free_query_factor``
    times as many queries before cancellation."""
    _nonneg(detections=detections)
    if not free_query_factor >= 1.0:
        raise ValueError("free_query_factor must be >= 1")
    return detections / free_query_factor


@dataclass
class EconomicsSummary:
    detections: float
    attacker_hours: float
    attacker_dollars: float
    undefended_dollars: float
    accounts_geometric: float
    bits_power_of_two: float
    bits_geometric: float
    probe_bits: float
    probe_queries: float
    storage_gb: float
    storage_usd_month: float

    def lines(self) -> list[str]:
        return [
            f"detections                {self.detections:g}",
            f"time-bounded cost         {self.attacker_hours:,.1f} h",
            f"query-bounded cost        ${self.attacker_dollars:,.2f}",
            f"undefended cost           ${self.undefended_dollars:,.2f}",
            f"accounts (geometric ban)  {self.accounts_geometric:.1f}",
            f"bits/account, pow2 ban    {self.bits_power_of_two:.2f}",
            f"bits/account, geometric   {self.bits_geometric:.2f}",
            f"optimal probing           {self.probe_bits:.2f} bits over {self.probe_queries:.0f} queries",
            f"buffer storage            {self.storage_gb:.4f} GB, ${self.storage_usd_month:.4f}/month",
        ]


def summarize_costs(detections: float = 97, buffer_hours: float = 100.0, buffer_queries: float = 10_000,
                    undefended_queries: float = 13_400, price_per_1000: float = PRICE_PER_1000,
                    max_queries: int = 2 ** 20, geometric_base: float = 1.1, probe_p: float = 1 / 18,
                    k: int = 50, encoding_dim: int = 256, precision_bytes: int = 2,
                    rate_per_minute: float = 1800.0, usd_per_gb_month: float = 0.026) -> EconomicsSummary:
    n_bytes = buffer_storage_bytes(encoding_dim, precision_bytes, rate_per_minute, buffer_hours)
    return EconomicsSummary(
        detections=detections,
        attacker_hours=time_bounded_hours(detections, buffer_hours),
        attacker_dollars=query_bounded_cost(detections, buffer_queries, price_per_1000),
        undefended_dollars=query_cost(undefended_queries, price_per_1000),
        accounts_geometric=accounts_with_delay(detections, geometric_base),
        bits_power_of_two=side_channel_bits(BanPolicy("power-of-two"), max_queries),
        bits_geometric=side_channel_bits(BanPolicy("geometric", geometric_base, k), max_queries),
        probe_bits=optimal_probe_bits(probe_p),
        probe_queries=optimal_probe_queries(probe_p, k),
        storage_gb=n_bytes / 1e9,
        storage_usd_month=storage_cost_per_month(n_bytes, usd_per_gb_month),
    )
