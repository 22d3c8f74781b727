"""Synthetic chat corpora and incident timelines with a planted, leading signal.

On every day ``t`` whose day ``t + lead`` has an incident, each message is
drawn from the attack lexicon with probability ``signal``; every other message
uses the benign lexicon. Output files use exactly the ingest input formats.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from datetime import date, datetime, timedelta, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError

# Raw labels in rough proportion to a Hackmageddon year, including the
# variants that normalisation must fold ("CVE-...", "Vulnerabilities", "Unknown").
RAW_ATTACK_TYPES = (
    ("Malware", 30), ("Unknown", 12), ("Vulnerabilities", 8), ("CVE-2023-23397", 4), ("Account Takeover", 9),
    ("Targeted Attack", 9), ("Ransomware", 7), ("DDoS", 4), ("Scam", 2), ("Misconfiguration", 1),
    ("Malicious Script Injection", 1), ("Brute-Force", 1), ("Deepfake", 1),
)
TARGETS = ("Hospital", "University", "Municipality", "Bank", "Retailer", "Telecom", "Energy Utility", "Ministry")


@lru_cache(maxsize=None)
def load_lexicon(name: str) -> tuple[str, ...]:
    raw = resources.files("sentinel").joinpath(f"data/lexicon_{name}_v1.txt").read_text("utf-8")
    return tuple(w.strip() for w in raw.splitlines() if w.strip() and not w.startswith("#"))


@dataclass(frozen=True)
class SynthConfig:
    n_groups: int = 4
    n_days: int = 240
    event_rate: float = 0.3
    lead_days: int = 1
    signal: float = 0.9
    messages_min: int = 3
    messages_max: int = 10
    seed: int = 0
    start: date = date(2023, 1, 1)
    forward_rate: float = 0.02

    def validate(self) -> None:
        errors = []
        if self.n_groups < 1:
            errors.append("n_groups must be >= 1")
        if self.n_days < 30:
            errors.append("n_days must be >= 30")
        if not 0 < self.event_rate < 1:
            errors.append("event_rate must be in (0, 1)")
        elif self.event_rate * self.n_days < 5:
            errors.append("event_rate * n_days must be >= 5")
        if self.lead_days < 0:
            errors.append("lead_days must be >= 0")
        if not 0 <= self.signal <= 1:
            errors.append("signal must be in [0, 1]")
        if not 1 <= self.messages_min <= self.messages_max:
            errors.append("need 1 <= messages_min <= messages_max")
        if not 0 <= self.forward_rate <= 1:
            errors.append("forward_rate must be in [0, 1]")
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = self.start.isoformat()
        return d


@dataclass
class SynthOutput:
    groups: dict[str, bytes]
    events_csv: bytes
    manifest: dict


def _message(rng: np.random.Generator, lexicon: tuple[str, ...]) -> str:
    n = int(rng.integers(5, 16))
    return " ".join(lexicon[i] for i in rng.integers(0, len(lexicon), size=n))


def generate(cfg: SynthConfig = SynthConfig()) -> SynthOutput:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    attack, benign = load_lexicon("attack"), load_lexicon("benign")
    days = [cfg.start + timedelta(days=i) for i in range(cfg.n_days)]

    is_event = rng.random(cfg.n_days) < cfg.event_rate
    event_days = [i for i in range(cfg.n_days) if is_event[i]]
    signal_days = [i - cfg.lead_days for i in event_days if i - cfg.lead_days >= 0]
    is_signal = np.zeros(cfg.n_days, dtype=bool)
    is_signal[signal_days] = True

    names, weights = zip(*RAW_ATTACK_TYPES)
    probs = np.array(weights, dtype=float) / sum(weights)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Date Reported", "Date Occurred", "Author", "Target", "Description", "Attack", "Target Class", "Country"])
    for i in event_days:
        for _ in range(int(rng.integers(1, 4))):
            kind = names[int(rng.choice(len(names), p=probs))]
            target = TARGETS[int(rng.integers(0, len(TARGETS)))]
            reported = days[i] + timedelta(days=int(rng.integers(0, 4)))
            writer.writerow([reported.isoformat(), days[i].isoformat(), "Unknown", target,
                             f"{kind} incident affecting a {target.lower()}", kind, "Synthetic", "XX"])

    group_ids = [f"channel_{g:02d}" for g in range(cfg.n_groups)]
    posts: dict[str, list[tuple[datetime, str, int]]] = {g: [] for g in group_ids}
    for i, day in enumerate(days):
        base = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
        for g in group_ids:
            for _ in range(int(rng.integers(cfg.messages_min, cfg.messages_max + 1))):
                lex = attack if is_signal[i] and rng.random() < cfg.signal else benign
                text = _message(rng, lex)
                ts = base + timedelta(seconds=int(rng.integers(0, 86400)))
                author = int(rng.integers(0, 50))
                posts[g].append((ts, text, author))
                if cfg.n_groups > 1 and rng.random() < cfg.forward_rate:
                    other = group_ids[int(rng.integers(0, cfg.n_groups))]
                    if other != g:
                        fwd_ts = base + timedelta(seconds=int(rng.integers(0, 86400)))
                        posts[other].append((fwd_ts, text, int(rng.integers(0, 50))))

    groups = {}
    for gi, g in enumerate(group_ids):
        msgs = []
        for k, (ts, text, author) in enumerate(sorted(posts[g], key=lambda p: p[0])):
            msgs.append({
                "id": k + 1,
                "type": "message",
                "date": ts.strftime("%Y-%m-%dT%H:%M:%S"),
                "date_unixtime": str(int(ts.timestamp())),
                "from": f"member {gi}-{author}",
                "from_id": f"user{gi * 1000 + author}",
                "text": text,
            })
        doc = {"name": g, "type": "public_channel", "id": 1000 + gi, "messages": msgs}
        groups[g] = json.dumps(doc, indent=1, ensure_ascii=False).encode("utf-8")

    manifest = {
        "event_days": [days[i].isoformat() for i in event_days],
        "signal_days": [days[i].isoformat() for i in signal_days],
        "cfg": cfg.to_dict(),
    }
    return SynthOutput(groups, buf.getvalue().encode("utf-8"), manifest)


def write_synth(out_dir: Path, cfg: SynthConfig = SynthConfig()) -> SynthOutput:
    """Writes ``groups/<id>.json``, ``events.csv`` and ``manifest.json`` under ``out_dir``."""
    out = generate(cfg)
    out_dir = Path(out_dir)
    (out_dir / "groups").mkdir(parents=True, exist_ok=True)
    for gid, blob in out.groups.items():
        (out_dir / "groups" / f"{gid}.json").write_bytes(blob)
    (out_dir / "events.csv").write_bytes(out.events_csv)
    (out_dir / "manifest.json").write_text(json.dumps(out.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
