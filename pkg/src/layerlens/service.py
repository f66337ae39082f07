"""The masked-image guessing game server.

Players receive a masked composite of a cluster map, guess the class from a
small randomized option set, may reveal more of the image up to five times,
then describe the features that led to their guess with free-text labels.
Screening items (deliberately easy maps curated by the operator) are
interleaved to estimate player trustworthiness.

All state mutations flow through a single event-applying writer guarded by
a lock; events append to a line-delimited log. Replaying the log from empty
state reconstructs every profile, game, and score exactly, because each
event records the outcome of any randomized choice.
"""

import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from layerlens.errors import NotFoundError, StateError, ValidationError

MAX_HINTS = 5


@dataclass
class ServiceConfig:
    base_points: int = 100
    hint_penalty: int = 15
    option_count: int = 5
    screening_cadence: int = 6  # every Nth issued game is a screening item
    trust_min_rate: float = 0.8
    trust_min_games: int = 2
    nickname_max: int = 32
    max_labels: int = 5
    ladder: list[float] = field(default_factory=lambda: [92, 86, 80, 74, 68, 62])
    host: str = "127.0.0.1"
    port: int = 8765
    data_dir: str = "service-data"
    games_manifest: str = ""
    static_dir: str = ""
    snapshot_every: int = 0  # 0 disables snapshots

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"missing service config: {path}")
        doc = json.loads(path.read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown service config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class PoolItem:
    """One playable cluster map: its composites and ground truth."""

    map_id: str
    true_class: str
    levels: list[str]  # image refs, level 0..5
    is_screening: bool = False


@dataclass
class GamePool:
    items: list[PoolItem]
    class_names: list[str]

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError("game pool needs at least 2 classes")
        ids = [item.map_id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate cluster-map ids in game pool")
        for item in self.items:
            if len(item.levels) != MAX_HINTS + 1:
                raise ValidationError(f"pool item {item.map_id!r} must have 6 levels")
            if item.true_class not in self.class_names:
                raise ValidationError(
                    f"pool item {item.map_id!r}: unknown class {item.true_class!r}"
                )

    @classmethod
    def load(cls, path: str | Path) -> "GamePool":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"missing games manifest: {path}")
        doc = json.loads(path.read_text())
        items = [
            PoolItem(
                map_id=it["map_id"],
                true_class=it["true_class"],
                levels=list(it["levels"]),
                is_screening=bool(it.get("is_screening", False)),
            )
            for it in doc["items"]
        ]
        return cls(items=items, class_names=list(doc["class_names"]))


@dataclass
class PlayerProfile:
    player_id: str
    nickname: str
    created_seq: int
    score: int = 0
    games_played: int = 0
    games_issued: int = 0
    screening_passed: int = 0
    screening_failed: int = 0
    served_maps: set[str] = field(default_factory=set)

    def trusted(self, config: ServiceConfig) -> bool:
        total = self.screening_passed + self.screening_failed
        if total < config.trust_min_games:
            return False
        return self.screening_passed / total >= config.trust_min_rate


@dataclass
class GameInstance:
    game_id: str
    player_id: str
    map_id: str
    true_class: str
    options: list[str]
    is_screening: bool
    hint_level: int = 0
    state: str = "open"  # open | guessed | resigned
    guessed_class: str | None = None
    correct: bool = False
    points: int = 0
    labels: list[str] = field(default_factory=list)
    request_cache: dict[str, dict] = field(default_factory=dict)


class GameService:
    """Pure game logic and durable event log; no HTTP here."""

    def __init__(
        self,
        pool: GamePool,
        config: ServiceConfig | None = None,
        log_path: str | Path | None = None,
    ):
        self.pool = pool
        self.config = config or ServiceConfig()
        self.players: dict[str, PlayerProfile] = {}
        self.games: dict[str, GameInstance] = {}
        self.seq = 0
        self._lock = threading.RLock()
        self._log_path = Path(log_path) if log_path else None
        if self._log_path:
            self._log_path.parent.mkdir(parents=True, exist_ok=True)

    # -- events --------------------------------------------------------

    def _append(self, kind: str, data: dict) -> dict:
        # write-ahead: persist the event before mutating state
        event = {"seq": self.seq + 1, "ts": time.time(), "type": kind, "data": data}
        if self._log_path:
            with self._log_path.open("a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        self.seq += 1
        self._apply(event)
        if self._log_path and self.config.snapshot_every and self.seq % self.config.snapshot_every == 0:
            self._write_snapshot()
        return event

    def _apply(self, event: dict) -> None:
        kind, data = event["type"], event["data"]
        if kind == "session_created":
            profile = PlayerProfile(
                player_id=data["player_id"],
                nickname=data["nickname"],
                created_seq=event["seq"],
            )
            self.players[profile.player_id] = profile
        elif kind == "game_issued":
            game = GameInstance(
                game_id=data["game_id"],
                player_id=data["player_id"],
                map_id=data["map_id"],
                true_class=data["true_class"],
                options=list(data["options"]),
                is_screening=data["is_screening"],
            )
            self.games[game.game_id] = game
            profile = self.players[game.player_id]
            profile.games_issued += 1
            profile.served_maps.add(game.map_id)
        elif kind == "hint":
            self.games[data["game_id"]].hint_level = data["level"]
        elif kind == "guess":
            game = self.games[data["game_id"]]
            game.state = "guessed"
            game.guessed_class = data["guessed_class"]
            game.correct = data["correct"]
            game.points = data["points"]
            profile = self.players[game.player_id]
            profile.score += game.points
            profile.games_played += 1
            if game.is_screening:
                if data["screening_passed"]:
                    profile.screening_passed += 1
                else:
                    profile.screening_failed += 1
        elif kind == "resign":
            game = self.games[data["game_id"]]
            game.state = "resigned"
            profile = self.players[game.player_id]
            profile.games_played += 1
            if game.is_screening:
                profile.screening_failed += 1
        elif kind == "labels":
            self.games[data["game_id"]].labels = list(data["labels"])
        else:
            raise ValidationError(f"unknown event type {kind!r}")

    @classmethod
    def replay(
        cls,
        pool: GamePool,
        log_path: str | Path,
        config: ServiceConfig | None = None,
    ) -> "GameService":
        """Rebuild a service from its event log (snapshot-aware)."""
        log_path = Path(log_path)
        service = cls(pool, config=config, log_path=None)
        snapshot_path = log_path.with_suffix(".snapshot.json")
        start_seq = 0
        if snapshot_path.is_file():
            start_seq = service._load_snapshot(snapshot_path)
        if log_path.is_file():
            for line in log_path.read_text().splitlines():
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["seq"] <= start_seq:
                    continue
                if event["seq"] != service.seq + 1:
                    raise ValidationError(
                        f"event log gap: expected seq {service.seq + 1}, got {event['seq']}"
                    )
                service.seq = event["seq"]
                service._apply(event)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        service._log_path = log_path
        return service

    # -- snapshots -------------------------------------------------------

    def snapshot(self) -> dict:
        """Canonical state dump; equality means equal service state."""
        with self._lock:
            return {
                "seq": self.seq,
                "players": {
                    pid: {
                        "player_id": p.player_id,
                        "nickname": p.nickname,
                        "created_seq": p.created_seq,
                        "score": p.score,
                        "games_played": p.games_played,
                        "games_issued": p.games_issued,
                        "screening_passed": p.screening_passed,
                        "screening_failed": p.screening_failed,
                        "served_maps": sorted(p.served_maps),
                        "trusted": p.trusted(self.config),
                    }
                    for pid, p in sorted(self.players.items())
                },
                "games": {
                    gid: {
                        "game_id": g.game_id,
                        "player_id": g.player_id,
                        "map_id": g.map_id,
                        "true_class": g.true_class,
                        "options": g.options,
                        "is_screening": g.is_screening,
                        "hint_level": g.hint_level,
                        "state": g.state,
                        "guessed_class": g.guessed_class,
                        "correct": g.correct,
                        "points": g.points,
                        "labels": g.labels,
                    }
                    for gid, g in sorted(self.games.items())
                },
            }

    def _write_snapshot(self) -> None:
        path = self._log_path.with_suffix(".snapshot.json")
        path.write_text(json.dumps(self.snapshot(), sort_keys=True) + "\n")

    def _load_snapshot(self, path: Path) -> int:
        doc = json.loads(path.read_text())
        self.seq = doc["seq"]
        for pid, p in doc["players"].items():
            self.players[pid] = PlayerProfile(
                player_id=p["player_id"],
                nickname=p["nickname"],
                created_seq=p["created_seq"],
                score=p["score"],
                games_played=p["games_played"],
                games_issued=p["games_issued"],
                screening_passed=p["screening_passed"],
                screening_failed=p["screening_failed"],
                served_maps=set(p["served_maps"]),
            )
        for gid, g in doc["games"].items():
            self.games[gid] = GameInstance(
                game_id=g["game_id"],
                player_id=g["player_id"],
                map_id=g["map_id"],
                true_class=g["true_class"],
                options=list(g["options"]),
                is_screening=g["is_screening"],
                hint_level=g["hint_level"],
                state=g["state"],
                guessed_class=g["guessed_class"],
                correct=g["correct"],
                points=g["points"],
                labels=list(g["labels"]),
            )
        return int(doc["seq"])

    # -- commands --------------------------------------------------------

    def create_session(self, nickname: str) -> PlayerProfile:
        nickname = (nickname or "").strip()
        if not 1 <= len(nickname) <= self.config.nickname_max:
            raise ValidationError(
                f"nickname must be 1-{self.config.nickname_max} characters"
            )
        with self._lock:
            player_id = f"p{len(self.players) + 1:04d}-{secrets.token_hex(4)}"
            self._append("session_created", {"player_id": player_id, "nickname": nickname})
            return self.players[player_id]

    def _player(self, player_id: str) -> PlayerProfile:
        profile = self.players.get(player_id)
        if profile is None:
            raise NotFoundError(f"unknown player {player_id!r}")
        return profile

    def _game(self, game_id: str) -> GameInstance:
        game = self.games.get(game_id)
        if game is None:
            raise NotFoundError(f"unknown game {game_id!r}")
        return game

    def next_game(self, player_id: str, seed: int | None = None) -> GameInstance:
        """Issue a game on an unserved cluster map with randomized options.

        Option classes are drawn uniformly without replacement (the true
        class always included, order shuffled); nothing about the model's
        confidence enters the choice. Screening items are interleaved every
        ``screening_cadence``-th issued game when one is available.
        """
        with self._lock:
            profile = self._player(player_id)
            if seed is None:
                seed = secrets.randbits(63)
            rng = np.random.default_rng(seed)
            unserved = [i for i in self.pool.items if i.map_id not in profile.served_maps]
            screening = [i for i in unserved if i.is_screening]
            regular = [i for i in unserved if not i.is_screening]
            ordinal = profile.games_issued + 1
            cadence = self.config.screening_cadence
            use_screening = bool(screening) and cadence > 0 and ordinal % cadence == 0
            candidates = screening if use_screening else (regular or screening)
            if not candidates:
                raise StateError("no games left for this player")
            item = candidates[int(rng.integers(len(candidates)))]
            others = [c for c in self.pool.class_names if c != item.true_class]
            k = min(self.config.option_count - 1, len(others))
            picked = list(rng.choice(len(others), size=k, replace=False))
            options = [item.true_class] + [others[i] for i in picked]
            options = [options[i] for i in rng.permutation(len(options))]
            game_id = f"g{len(self.games) + 1:06d}"
            self._append(
                "game_issued",
                {
                    "game_id": game_id,
                    "player_id": player_id,
                    "map_id": item.map_id,
                    "true_class": item.true_class,
                    "options": options,
                    "is_screening": item.is_screening,
                    "seed": seed,
                },
            )
            return self.games[game_id]

    def image_ref(self, game: GameInstance, level: int | None = None) -> str:
        item = next(i for i in self.pool.items if i.map_id == game.map_id)
        return item.levels[game.hint_level if level is None else level]

    def request_hint(self, game_id: str, request_id: str | None = None) -> GameInstance:
        with self._lock:
            game = self._game(game_id)
            if request_id and request_id in game.request_cache:
                return game
            if game.state != "open":
                raise StateError(f"game {game_id} is {game.state}; no more hints")
            if game.hint_level >= MAX_HINTS:
                raise StateError(
                    "all five hints used; guess now or resign to finish the game"
                )
            self._append("hint", {"game_id": game_id, "level": game.hint_level + 1})
            if request_id:
                game.request_cache[request_id] = {"level": game.hint_level}
            return game

    def submit_guess(
        self, game_id: str, guessed_class: str, request_id: str | None = None
    ) -> GameInstance:
        with self._lock:
            game = self._game(game_id)
            if request_id and request_id in game.request_cache:
                return game
            if game.state != "open":
                raise StateError(f"game {game_id} is already {game.state}")
            if guessed_class not in game.options:
                raise ValidationError(f"{guessed_class!r} is not among this game's options")
            correct = guessed_class == game.true_class
            points = (
                max(0, self.config.base_points - self.config.hint_penalty * game.hint_level)
                if correct
                else 0
            )
            screening_passed = game.is_screening and correct and game.hint_level <= 2
            self._append(
                "guess",
                {
                    "game_id": game_id,
                    "guessed_class": guessed_class,
                    "correct": correct,
                    "points": points,
                    "hints_used": game.hint_level,
                    "screening_passed": screening_passed,
                },
            )
            if request_id:
                game.request_cache[request_id] = {"points": points}
            return game

    def resign(self, game_id: str) -> GameInstance:
        with self._lock:
            game = self._game(game_id)
            if game.state != "open":
                raise StateError(f"game {game_id} is already {game.state}")
            self._append("resign", {"game_id": game_id})
            return game

    def submit_labels(self, game_id: str, texts: list[str]) -> GameInstance:
        with self._lock:
            game = self._game(game_id)
            if game.state == "open":
                raise StateError("labels are accepted only after a guess or resignation")
            if game.labels:
                raise StateError(f"game {game_id} already has labels")
            if not 1 <= len(texts) <= self.config.max_labels:
                raise ValidationError(f"submit 1-{self.config.max_labels} labels")
            for text in texts:
                if not 1 <= len(text) <= 64:
                    raise ValidationError("each label must be 1-64 characters")
            self._append("labels", {"game_id": game_id, "labels": list(texts)})
            return game

    # -- reads -----------------------------------------------------------

    def leaderboard(self, limit: int = 10) -> list[PlayerProfile]:
        with self._lock:
            ranked = sorted(self.players.values(), key=lambda p: (-p.score, p.created_seq))
            return ranked[: max(0, limit)]

    def open_game(self, player_id: str) -> GameInstance | None:
        with self._lock:
            self._player(player_id)
            for game in self.games.values():
                if game.player_id == player_id and game.state == "open":
                    return game
            return None

    def export_labels(self) -> list[dict]:
        """Label records for the analysis pipeline, one per labeled game.

        Trust is evaluated at export time: records from players whose
        screening history does not meet the trust rule are marked untrusted.
        """
        with self._lock:
            out = []
            for gid in sorted(self.games):
                game = self.games[gid]
                if not game.labels:
                    continue
                profile = self.players[game.player_id]
                out.append(
                    {
                        "user": game.player_id,
                        "cluster_map_id": game.map_id,
                        "guessed_class": game.guessed_class,
                        "true_class": game.true_class,
                        "correct": game.correct,
                        "hints_used": game.hint_level,
                        "labels": list(game.labels),
                        "trusted": profile.trusted(self.config),
                    }
                )
            return out

    def write_label_export(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(rec, sort_keys=True) for rec in self.export_labels()]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        return path


def evaluate_trust(profile: PlayerProfile, config: ServiceConfig | None = None) -> bool:
    """Trust rule: screening pass rate >= 0.8 over at least 2 screening games."""
    return profile.trusted(config or ServiceConfig())


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------


def create_app(service: GameService, image_root: str | Path, static_dir: str | Path | None = None):
    """FastAPI app over a GameService. Only composited images are served."""
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.responses import FileResponse
    from pydantic import BaseModel

    image_root = Path(image_root)
    allowed_refs = {ref for item in service.pool.items for ref in item.levels}

    class SessionBody(BaseModel):
        nickname: str

    class GuessBody(BaseModel):
        class_name: str
        request_id: str | None = None

    class HintBody(BaseModel):
        request_id: str | None = None

    class LabelsBody(BaseModel):
        labels: list[str]

    app = FastAPI(title="deep reveal service")

    def game_view(game: GameInstance) -> dict:
        return {
            "game_id": game.game_id,
            "options": game.options,
            "hint_level": game.hint_level,
            "hints_left": MAX_HINTS - game.hint_level,
            "state": game.state,
            "image": f"/api/image/{service.image_ref(game)}",
        }

    def run(command, *args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NotFoundError as err:
            raise HTTPException(status_code=404, detail=str(err))
        except StateError as err:
            raise HTTPException(status_code=409, detail=str(err))
        except ValidationError as err:
            raise HTTPException(status_code=400, detail=str(err))

    @app.post("/api/session")
    def create_session(body: SessionBody):
        profile = run(service.create_session, body.nickname)
        return {
            "player_id": profile.player_id,
            "nickname": profile.nickname,
            "score": profile.score,
            "trusted": profile.trusted(service.config),
        }

    @app.get("/api/game/next")
    def next_game(player: str, seed: int | None = Query(default=None)):
        game = run(service.next_game, player, seed)
        return game_view(game)

    @app.get("/api/game/current")
    def current_game(player: str):
        game = run(service.open_game, player)
        return game_view(game) if game else {"game_id": None}

    @app.post("/api/game/{game_id}/hint")
    def request_hint(game_id: str, body: HintBody | None = None):
        request_id = body.request_id if body else None
        game = run(service.request_hint, game_id, request_id)
        return game_view(game)

    @app.post("/api/game/{game_id}/guess")
    def submit_guess(game_id: str, body: GuessBody):
        game = run(service.submit_guess, game_id, body.class_name, body.request_id)
        return {
            "game_id": game.game_id,
            "correct": game.correct,
            "points": game.points,
            "true_class": game.true_class,
            "state": game.state,
        }

    @app.post("/api/game/{game_id}/resign")
    def resign(game_id: str):
        game = run(service.resign, game_id)
        return {"game_id": game.game_id, "state": game.state}

    @app.post("/api/game/{game_id}/labels")
    def submit_labels(game_id: str, body: LabelsBody):
        game = run(service.submit_labels, game_id, body.labels)
        return {"game_id": game.game_id, "stored": len(game.labels)}

    @app.get("/api/leaderboard")
    def leaderboard(limit: int = 10):
        entries = service.leaderboard(limit)
        return [
            {
                "nickname": p.nickname,
                "score": p.score,
                "games_played": p.games_played,
            }
            for p in entries
        ]

    @app.get("/api/image/{ref:path}")
    def image(ref: str):
        if ref not in allowed_refs:
            raise HTTPException(status_code=404, detail="unknown image")
        path = image_root / ref
        if not path.is_file():
            raise HTTPException(status_code=404, detail="image file missing")
        return FileResponse(path, media_type="image/png")

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="app")

    return app
