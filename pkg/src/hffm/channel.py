"""Link-rate and transfer-cost model.

Shannon capacity over log-distance path loss for the wireless uplink and
D2D links; fixed rates for the server-to-device downlink and the
edge-to-cloud backhaul. Channels are orthogonal, so simultaneous transfers
never contend for bandwidth.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .errors import ConfigError


class LinkKind(str, enum.Enum):
    UPLINK = "uplink"
    DOWNLINK = "downlink"
    D2D = "d2d"
    BACKHAUL = "backhaul"

    @property
    def shannon(self) -> bool:
        return self in (LinkKind.UPLINK, LinkKind.D2D)


def _default_bandwidths():
    return {"uplink": 1e6, "d2d": 20e6}


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_hz: dict = field(default_factory=_default_bandwidths)
    noise_power_dbm_per_hz: float = -174.0
    path_loss_exponent: float = 3.0
    reference_distance_m: float = 1.0
    reference_loss_db: float = 40.0
    backhaul_rate_bps: float = 100e6
    downlink_rate_bps: float = 20e6
    rx_idle_power_w: float = 0.1
    receive_energy: bool = False
    compute_energy: bool = True

    def validate(self, path="channel"):
        for kind in ("uplink", "d2d"):
            if kind not in self.bandwidth_hz:
                raise ConfigError("missing bandwidth", f"{path}.bandwidth_hz.{kind}")
        for kind, bw in self.bandwidth_hz.items():
            if kind not in ("uplink", "d2d"):
                raise ConfigError("unknown link kind", f"{path}.bandwidth_hz.{kind}")
            if not bw > 0:
                raise ConfigError("must be > 0", f"{path}.bandwidth_hz.{kind}")
        for name in ("reference_distance_m", "backhaul_rate_bps", "downlink_rate_bps"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", f"{path}.{name}")
        if not self.path_loss_exponent >= 2:
            raise ConfigError("must be >= 2", f"{path}.path_loss_exponent")
        if not self.rx_idle_power_w >= 0:
            raise ConfigError("must be >= 0", f"{path}.rx_idle_power_w")

    def bandwidth(self, kind: LinkKind) -> float:
        return float(self.bandwidth_hz[kind.value])

    @property
    def rx_power_w(self) -> float:
        return self.rx_idle_power_w if self.receive_energy else 0.0


@dataclass(frozen=True)
class TransferCost:
    latency_s: float
    energy_j: float
    rate_bps: float


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def path_loss_db(distance_m: float, params: ChannelParams) -> float:
    d = max(distance_m, params.reference_distance_m)
    return params.reference_loss_db + 10.0 * params.path_loss_exponent * math.log10(
        d / params.reference_distance_m
    )


def snr(distance_m: float, tx_power_w: float, kind: LinkKind, params: ChannelParams) -> float:
    gain = 10.0 ** (-path_loss_db(distance_m, params) / 10.0)
    noise_w = dbm_to_watts(params.noise_power_dbm_per_hz) * params.bandwidth(kind)
    return tx_power_w * gain / noise_w


def link_rate_bps(distance_m: float, tx_power_w: float, kind: LinkKind, params: ChannelParams) -> float:
    kind = LinkKind(kind)
    if kind is LinkKind.BACKHAUL:
        return params.backhaul_rate_bps
    if kind is LinkKind.DOWNLINK:
        return params.downlink_rate_bps
    return params.bandwidth(kind) * math.log2(1.0 + snr(distance_m, tx_power_w, kind, params))


def transfer_cost(nbytes: int, rate_bps: float, tx_power_w: float, rx_power_w: float = 0.0) -> TransferCost:
    """Latency and energy of moving ``nbytes`` at ``rate_bps``.

    ``rx_power_w`` is added to the transmit power when receive-side energy
    is accounted (pass ``params.rx_power_w``).
    """
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    if not rate_bps > 0:
        raise ValueError("rate_bps must be > 0")
    latency = 8.0 * nbytes / rate_bps
    return TransferCost(latency, (tx_power_w + rx_power_w) * latency, rate_bps)
