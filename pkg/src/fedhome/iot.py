"""Simulated smart home: scenario rules, auth, device endpoints, control paths.

Pipelines run against a virtual clock; stage durations come from a
LatencyProfile, so a full latency sweep takes milliseconds of wall time.
Control paths differ only in which stages they spend time in (and where
authentication nominally runs); authentication behavior itself is identical
everywhere and devices never change state without a prior allow decision.
"""

from __future__ import annotations

import hmac
import json
import secrets
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .datasets import ActivityLabel
from .errors import ConfigError, DispatchError

STAGES = ("capture", "transfer", "detect", "message", "react")


class ControlPath(Enum):
    LOCAL_FL = "local_fl"
    REMOTE_FL = "remote_fl"
    REMOTE_CL = "remote_cl"
    REMOTE_CL_IFTTT = "remote_cl_ifttt"


# Stages that actually consume time on each path. Local control never pays
# the upload or cloud-trigger hops; fully remote paths pay both.
PATH_STAGES: dict[ControlPath, tuple[str, ...]] = {
    ControlPath.LOCAL_FL: ("capture", "detect", "react"),
    ControlPath.REMOTE_FL: ("capture", "detect", "message", "react"),
    ControlPath.REMOTE_CL: ("capture", "transfer", "detect", "message", "react"),
    ControlPath.REMOTE_CL_IFTTT: ("capture", "transfer", "detect", "message", "react"),
}


class DeviceKind(Enum):
    SMART_LIGHT = "smart_light"
    SMART_SPEAKER = "smart_speaker"
    WIFI_ROUTER = "wifi_router"
    LOCAL_DATABASE = "local_database"


@dataclass(frozen=True)
class ScenarioRule:
    activity: ActivityLabel
    device: DeviceKind
    action: str


def default_rules() -> dict[ActivityLabel, tuple[ScenarioRule, ...]]:
    """Activity -> device actions: reading lights up the room, drinking water
    is logged and announced, laptop/phone use tunes the router, dish washing
    starts media playback."""
    A, D = ActivityLabel, DeviceKind
    return {
        A.READING: (ScenarioRule(A.READING, D.SMART_LIGHT, "light.on"),),
        A.DRINKING_WATER: (
            ScenarioRule(A.DRINKING_WATER, D.LOCAL_DATABASE, "db.record_intake"),
            ScenarioRule(A.DRINKING_WATER, D.SMART_SPEAKER, "speaker.notify(water intake recorded)"),
        ),
        A.USING_LAPTOP: (
            ScenarioRule(A.USING_LAPTOP, D.WIFI_ROUTER, "router.block_url(harmful.example)"),
        ),
        A.USING_MOBILE_PHONE: (
            ScenarioRule(A.USING_MOBILE_PHONE, D.WIFI_ROUTER, "router.shape_traffic(mobile)"),
        ),
        A.WASHING_DISHES: (
            ScenarioRule(A.WASHING_DISHES, D.SMART_SPEAKER, "speaker.play_media(video stream)"),
        ),
    }


def parse_action(action: str) -> tuple[str, str | None]:
    """Split "verb" or "verb(argument)" into (verb, argument)."""
    action = action.strip()
    if action.endswith(")") and "(" in action:
        verb, _, rest = action.partition("(")
        return verb.strip(), rest[:-1]
    return action, None


# --- devices -----------------------------------------------------------------


class SmartLight:
    kind = DeviceKind.SMART_LIGHT

    def __init__(self):
        self.is_on = False
        self.color = "white"

    def apply(self, action: str, at: float) -> None:
        verb, arg = parse_action(action)
        if verb == "light.on":
            self.is_on = True
        elif verb == "light.off":
            self.is_on = False
        elif verb == "light.color" and arg:
            self.color = arg
        else:
            raise DispatchError(f"smart light cannot handle {action!r}")


class SmartSpeaker:
    kind = DeviceKind.SMART_SPEAKER

    def __init__(self):
        self.notifications: list[str] = []
        self.media_queue: list[str] = []

    def apply(self, action: str, at: float) -> None:
        verb, arg = parse_action(action)
        if verb == "speaker.notify":
            self.notifications.append(arg or "")
        elif verb == "speaker.play_media":
            self.media_queue.append(arg or "")
        else:
            raise DispatchError(f"smart speaker cannot handle {action!r}")


class WifiRouter:
    kind = DeviceKind.WIFI_ROUTER

    def __init__(self):
        self.blocked_urls: set[str] = set()
        self.shaping_rules: dict[str, str] = {}

    def apply(self, action: str, at: float) -> None:
        verb, arg = parse_action(action)
        if verb == "router.block_url" and arg:
            self.blocked_urls.add(arg)  # idempotent
        elif verb == "router.unblock_url" and arg:
            self.blocked_urls.discard(arg)
        elif verb == "router.shape_traffic" and arg:
            self.shaping_rules[arg] = "limited"
        else:
            raise DispatchError(f"wifi router cannot handle {action!r}")


class IntakeDatabase:
    kind = DeviceKind.LOCAL_DATABASE

    def __init__(self):
        self.rows: list[tuple[float, str]] = []

    def apply(self, action: str, at: float, user: str = "") -> None:
        verb, _ = parse_action(action)
        if verb == "db.record_intake":
            self.rows.append((at, user))
        else:
            raise DispatchError(f"database cannot handle {action!r}")


def device_endpoint(device, action: str, at: float, user: str = "") -> None:
    """Apply one action to one device; DispatchError if unsupported."""
    if isinstance(device, IntakeDatabase):
        device.apply(action, at, user)
    else:
        device.apply(action, at)


# --- authentication ----------------------------------------------------------


@dataclass
class AuthRegistry:
    """user id -> (shared secret token, permitted device kinds)."""

    tokens: dict[str, str] = field(default_factory=dict)
    permissions: dict[str, set[DeviceKind]] = field(default_factory=dict)

    def add_user(self, user: str, devices, token: str | None = None) -> str:
        token = token if token is not None else secrets.token_hex(16)
        self.tokens[user] = token
        self.permissions[user] = set(devices)
        return token


@dataclass(frozen=True)
class AuthDecision:
    allowed: bool
    reason: str | None = None  # unknown_user | bad_token | no_permission


def authenticate(user: str, device: DeviceKind, token: str, registry: AuthRegistry) -> AuthDecision:
    """Allow iff the token matches and the device is permitted; default deny."""
    expected = registry.tokens.get(user)
    if expected is None:
        return AuthDecision(False, "unknown_user")
    if not hmac.compare_digest(str(expected), str(token)):
        return AuthDecision(False, "bad_token")
    if device not in registry.permissions.get(user, set()):
        return AuthDecision(False, "no_permission")
    return AuthDecision(True)


# --- latency profiles and pipeline -------------------------------------------


@dataclass(frozen=True)
class LatencyProfile:
    capture: float = 0.0
    transfer: float = 0.0
    detect: float = 0.0
    message: float = 0.0
    react: float = 0.0
    jitter_std: tuple[float, float, float, float, float] | None = None

    def stage(self, name: str) -> float:
        return getattr(self, name)

    def validate_for(self, path: ControlPath) -> None:
        used = PATH_STAGES[path]
        for name in STAGES:
            value = self.stage(name)
            if value < 0:
                raise ConfigError(f"stage {name} must be >= 0")
            if name not in used and value != 0.0:
                raise ConfigError(
                    f"profile stage {name!r} must be 0 for path {path.value}"
                )

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(self.stage(s) for s in STAGES)


class Clock:
    """Virtual clock: advances only when told to."""

    def __init__(self, start: float = 0.0):
        self.now = float(start)

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ConfigError("cannot advance the clock backwards")
        self.now += dt
        return self.now


@dataclass
class SmartHome:
    devices: dict[DeviceKind, object]
    registry: AuthRegistry
    rules: dict[ActivityLabel, tuple[ScenarioRule, ...]]

    @classmethod
    def fresh(cls, registry: AuthRegistry | None = None) -> "SmartHome":
        home = cls(
            devices={
                DeviceKind.SMART_LIGHT: SmartLight(),
                DeviceKind.SMART_SPEAKER: SmartSpeaker(),
                DeviceKind.WIFI_ROUTER: WifiRouter(),
                DeviceKind.LOCAL_DATABASE: IntakeDatabase(),
            },
            registry=registry if registry is not None else AuthRegistry(),
            rules=default_rules(),
        )
        return home


@dataclass(frozen=True)
class PipelineTrace:
    path: ControlPath
    activity: ActivityLabel | None
    durations: dict  # stage name -> seconds actually spent
    total: float
    user: str
    allowed: bool
    deny_reason: str | None
    actions: tuple[str, ...]  # "device_kind:action" actually dispatched
    started_at: float
    finished_at: float


def run_pipeline(
    activity: ActivityLabel | None,
    path: ControlPath,
    profile: LatencyProfile,
    home: SmartHome,
    clock: Clock,
    *,
    user: str,
    token: str,
    rng: np.random.Generator | None = None,
) -> PipelineTrace:
    """Capture -> (upload) -> detect -> authenticate/trigger -> device action.

    Every stage advances the virtual clock by its profile duration (plus
    optional clipped Gaussian jitter). Denied or unknown requests still
    produce a trace, with no device dispatched and no reaction time spent.
    """
    profile.validate_for(path)
    used = PATH_STAGES[path]

    def stage_time(name: str) -> float:
        if name not in used:
            return 0.0
        base = profile.stage(name)
        if rng is not None and profile.jitter_std is not None:
            std = profile.jitter_std[STAGES.index(name)]
            if std > 0:
                base = max(0.0, base + rng.normal(0.0, std))
        return base

    started = clock.now
    durations = {name: 0.0 for name in STAGES}
    for name in ("capture", "transfer", "detect", "message"):
        durations[name] = stage_time(name)
        clock.advance(durations[name])

    rules = home.rules.get(activity, ()) if activity is not None else ()
    decision = AuthDecision(False, "no_rule")
    dispatched: list[str] = []
    if rules:
        # One auth decision per trace: all rule steps belong to one request.
        decision = authenticate(user, rules[0].device, token, home.registry)
        for rule in rules[1:]:
            step = authenticate(user, rule.device, token, home.registry)
            if not step.allowed:
                decision = step
                break
    if rules and decision.allowed:
        durations["react"] = stage_time("react")
        clock.advance(durations["react"])
        for rule in rules:
            device = home.devices[rule.device]
            device_endpoint(device, rule.action, clock.now, user)
            dispatched.append(f"{rule.device.value}:{rule.action}")

    total = sum(durations.values())
    return PipelineTrace(
        path=path,
        activity=activity,
        durations=durations,
        total=total,
        user=user,
        allowed=bool(rules) and decision.allowed,
        deny_reason=None if (rules and decision.allowed) else decision.reason,
        actions=tuple(dispatched),
        started_at=started,
        finished_at=clock.now,
    )


# --- scaling model -----------------------------------------------------------


@dataclass(frozen=True)
class ScalingCalibration:
    """Two published (clients, seconds) anchor points per curve."""

    fl_anchors: tuple[tuple[float, float], tuple[float, float]] = ((10, 0.4), (100, 4.8))
    cl_anchors: tuple[tuple[float, float], tuple[float, float]] = ((10, 1.1), (100, 9.5))


DEFAULT_CALIBRATION = ScalingCalibration()


def _two_point(n: float, anchors) -> float:
    (n0, t0), (n1, t1) = anchors
    base = t0 - n0 * (t1 - t0) / (n1 - n0)
    if n < n0 and base < 0:
        # A negative intercept would predict sub-zero times for tiny n;
        # below the first anchor use a ray through the origin instead.
        return t0 * (n / n0)
    return t0 + (t1 - t0) * ((n - n0) / (n1 - n0))


def scaling_model(
    path: ControlPath, n_clients: int, calib: ScalingCalibration = DEFAULT_CALIBRATION
) -> float:
    """Predicted serving-side response seconds under n concurrent clients."""
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if path == ControlPath.LOCAL_FL:
        return _two_point(float(n_clients), calib.fl_anchors)
    if path == ControlPath.REMOTE_CL:
        return _two_point(float(n_clients), calib.cl_anchors)
    raise ConfigError("scaling model covers the local-FL and remote-CL paths only")


# --- shipped defaults ---------------------------------------------------------


def _data_path() -> Path:
    return Path(__file__).parent / "data" / "home_defaults.json"


def load_home_config(path=None) -> dict:
    """Parsed defaults file: per-activity profiles, per-path profiles for the
    reading scenario, scaling anchors, rules, and a sample auth registry."""
    p = Path(path) if path is not None else _data_path()
    try:
        if p.suffix == ".toml":
            import tomli

            obj = tomli.loads(p.read_text())
        else:
            obj = json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read home config {p}: {exc}") from exc
    return obj


def profile_from_obj(obj: dict) -> LatencyProfile:
    try:
        jitter = obj.get("jitter_std")
        return LatencyProfile(
            capture=float(obj["capture"]),
            transfer=float(obj.get("transfer", 0.0)),
            detect=float(obj["detect"]),
            message=float(obj.get("message", 0.0)),
            react=float(obj["react"]),
            jitter_std=tuple(float(j) for j in jitter) if jitter else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed latency profile: {exc}") from exc


def activity_profiles(config: dict) -> dict[ActivityLabel, tuple[ControlPath, LatencyProfile]]:
    out = {}
    try:
        for name, entry in config["activity_profiles"].items():
            label = ActivityLabel[name.upper()]
            out[label] = (ControlPath(entry["path"]), profile_from_obj(entry))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed activity profiles: {exc}") from exc
    return out


def reading_path_profiles(config: dict) -> dict[ControlPath, LatencyProfile]:
    out = {}
    try:
        for name, entry in config["reading_path_profiles"].items():
            out[ControlPath(name)] = profile_from_obj(entry)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed path profiles: {exc}") from exc
    return out


def rules_from_obj(config: dict) -> dict[ActivityLabel, tuple[ScenarioRule, ...]]:
    if "rules" not in config:
        return default_rules()
    out: dict[ActivityLabel, tuple[ScenarioRule, ...]] = {}
    try:
        for name, steps in config["rules"].items():
            label = ActivityLabel[name.upper()]
            out[label] = tuple(
                ScenarioRule(label, DeviceKind(s["device"]), str(s["action"]))
                for s in steps
            )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed rules: {exc}") from exc
    return out


def registry_from_obj(config: dict) -> AuthRegistry:
    registry = AuthRegistry()
    for user, entry in config.get("auth_registry", {}).items():
        try:
            devices = [DeviceKind(d) for d in entry["devices"]]
            registry.add_user(user, devices, token=str(entry["token"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"malformed auth registry entry for {user}: {exc}") from exc
    return registry
