"""Game service: rules, scoring, trust, fairness statistics, durability,
and the HTTP surface."""

import json

import numpy as np
import pytest

from layerlens.errors import StateError, ValidationError
from layerlens.service import (
    GamePool,
    GameService,
    PoolItem,
    ServiceConfig,
    evaluate_trust,
)

CLASSES = [f"class{i}" for i in range(10)]


def pool_items(count, screening=0, true_class=None):
    items = []
    for i in range(count):
        items.append(
            PoolItem(
                map_id=f"img/m{i}",
                true_class=true_class or CLASSES[i % len(CLASSES)],
                levels=[f"masks/m{i}/level{j}.png" for j in range(6)],
                is_screening=i < screening,
            )
        )
    return items


def make_service(count=30, screening=0, config=None, log_path=None, true_class=None):
    pool = GamePool(items=pool_items(count, screening, true_class), class_names=list(CLASSES))
    return GameService(pool, config=config or ServiceConfig(), log_path=log_path)


class TestSessions:
    def test_create_session_defaults(self):
        svc = make_service()
        profile = svc.create_session("ada")
        assert profile.score == 0
        assert not profile.trusted(svc.config)

    def test_nickname_bounds(self):
        svc = make_service()
        with pytest.raises(ValidationError):
            svc.create_session("")
        with pytest.raises(ValidationError):
            svc.create_session("x" * 33)
        assert svc.create_session("x" * 32).nickname == "x" * 32

    def test_duplicate_nicknames_distinct_ids(self):
        svc = make_service()
        a = svc.create_session("ada")
        b = svc.create_session("ada")
        assert a.player_id != b.player_id


class TestNextGame:
    def test_options_contain_true_class_once(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=1)
        assert len(game.options) == 5
        assert game.options.count(game.true_class) == 1
        assert len(set(game.options)) == 5

    def test_fixed_seed_reproducible(self):
        a = make_service().create_session("ada")
        svc1 = make_service()
        svc2 = make_service()
        p1 = svc1.create_session("ada")
        p2 = svc2.create_session("ada")
        g1 = svc1.next_game(p1.player_id, seed=99)
        g2 = svc2.next_game(p2.player_id, seed=99)
        assert g1.options == g2.options
        assert g1.map_id == g2.map_id

    def test_pool_exhaustion(self):
        svc = make_service(count=2)
        player = svc.create_session("ada")
        for i in range(2):
            game = svc.next_game(player.player_id, seed=i)
            svc.submit_guess(game.game_id, game.true_class)
        with pytest.raises(StateError, match="no games left"):
            svc.next_game(player.player_id, seed=5)

    def test_option_frequency_uniform(self):
        # every non-true class should fill one of 4 slots among 9 candidates
        svc = make_service(count=1200, true_class="class0")
        player = svc.create_session("ada")
        counts = {c: 0 for c in CLASSES if c != "class0"}
        n_games = 1000
        for i in range(n_games):
            game = svc.next_game(player.player_id, seed=i)
            for option in game.options:
                if option != "class0":
                    counts[option] += 1
            svc.submit_guess(game.game_id, game.true_class)
        for cls, count in counts.items():
            assert abs(count / n_games - 4 / 9) <= 0.05, (cls, count / n_games)

    def test_screening_interleave_cadence(self):
        config = ServiceConfig(screening_cadence=3)
        svc = make_service(count=30, screening=10, config=config)
        player = svc.create_session("ada")
        kinds = []
        for i in range(9):
            game = svc.next_game(player.player_id, seed=i)
            kinds.append(game.is_screening)
            svc.submit_guess(game.game_id, game.true_class)
        assert kinds == [False, False, True] * 3


class TestHints:
    def test_hint_ladder(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        assert svc.image_ref(game).endswith("level0.png")
        for level in range(1, 6):
            game = svc.request_hint(game.game_id)
            assert game.hint_level == level
            assert svc.image_ref(game).endswith(f"level{level}.png")
        with pytest.raises(StateError, match="resign"):
            svc.request_hint(game.game_id)

    def test_hint_after_close_rejected(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class)
        with pytest.raises(StateError):
            svc.request_hint(game.game_id)

    def test_hint_idempotent_replay(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.request_hint(game.game_id, request_id="r1")
        svc.request_hint(game.game_id, request_id="r1")
        assert svc.games[game.game_id].hint_level == 1


class TestGuessing:
    def test_points_formula(self):
        svc = make_service()
        player = svc.create_session("ada")
        # 0 hints
        game = svc.next_game(player.player_id, seed=0)
        game = svc.submit_guess(game.game_id, game.true_class)
        assert game.points == 100
        # 3 hints
        game = svc.next_game(player.player_id, seed=1)
        for _ in range(3):
            svc.request_hint(game.game_id)
        game = svc.submit_guess(game.game_id, game.true_class)
        assert game.points == 55
        # wrong guess
        game = svc.next_game(player.player_id, seed=2)
        wrong = next(c for c in game.options if c != game.true_class)
        game = svc.submit_guess(game.game_id, wrong)
        assert game.points == 0
        assert not game.correct
        assert svc.players[player.player_id].score == 155

    def test_points_monotone_in_hints(self):
        svc = make_service()
        player = svc.create_session("ada")
        previous = 101
        for hints in range(6):
            game = svc.next_game(player.player_id, seed=hints)
            for _ in range(hints):
                svc.request_hint(game.game_id)
            game = svc.submit_guess(game.game_id, game.true_class)
            assert game.points <= previous
            previous = game.points

    def test_guess_not_in_options_rejected(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        outside = next(c for c in CLASSES if c not in game.options)
        with pytest.raises(ValidationError):
            svc.submit_guess(game.game_id, outside)

    def test_double_guess_rejected_but_request_id_replays(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class, request_id="q")
        replay = svc.submit_guess(game.game_id, game.true_class, request_id="q")
        assert replay.points == 100
        assert svc.players[player.player_id].score == 100
        with pytest.raises(StateError):
            svc.submit_guess(game.game_id, game.true_class, request_id="other")


class TestLabels:
    def test_labels_stored_after_guess(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class)
        svc.submit_labels(game.game_id, ["steeple", "cross"])
        records = svc.export_labels()
        assert len(records) == 1
        assert records[0]["labels"] == ["steeple", "cross"]
        assert records[0]["hints_used"] == 0
        assert records[0]["correct"] is True

    def test_label_records_copy_hints_from_the_game(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.request_hint(game.game_id)
        svc.request_hint(game.game_id)
        svc.submit_guess(game.game_id, game.true_class)
        svc.submit_labels(game.game_id, ["steeple", "cross"])
        record = svc.export_labels()[0]
        assert record["hints_used"] == 2
        assert record["labels"] == ["steeple", "cross"]

    def test_labels_on_open_game_rejected(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        with pytest.raises(StateError):
            svc.submit_labels(game.game_id, ["x"])

    def test_label_count_bounds(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class)
        with pytest.raises(ValidationError):
            svc.submit_labels(game.game_id, [])
        with pytest.raises(ValidationError):
            svc.submit_labels(game.game_id, ["a"] * 6)
        with pytest.raises(ValidationError):
            svc.submit_labels(game.game_id, ["x" * 65])

    def test_resigned_game_collects_labels_marked_wrong(self):
        svc = make_service()
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.resign(game.game_id)
        svc.submit_labels(game.game_id, ["blurry thing"])
        rec = svc.export_labels()[0]
        assert rec["correct"] is False
        assert rec["guessed_class"] is None


class TestTrust:
    def config(self):
        return ServiceConfig(screening_cadence=1)  # every game screening

    def play_screenings(self, svc, player, outcomes):
        for i, passed in enumerate(outcomes):
            game = svc.next_game(player.player_id, seed=i)
            assert game.is_screening
            if passed:
                svc.submit_guess(game.game_id, game.true_class)
            else:
                wrong = next(c for c in game.options if c != game.true_class)
                svc.submit_guess(game.game_id, wrong)

    def test_two_passes_trusted(self):
        svc = make_service(screening=10, config=self.config())
        player = svc.create_session("ada")
        self.play_screenings(svc, player, [True, True])
        assert evaluate_trust(svc.players[player.player_id], svc.config)

    def test_one_pass_three_fails_untrusted(self):
        svc = make_service(screening=10, config=self.config())
        player = svc.create_session("ada")
        self.play_screenings(svc, player, [True, False, False, False])
        assert not evaluate_trust(svc.players[player.player_id], svc.config)

    def test_single_screening_insufficient(self):
        svc = make_service(screening=10, config=self.config())
        player = svc.create_session("ada")
        self.play_screenings(svc, player, [True])
        assert not evaluate_trust(svc.players[player.player_id], svc.config)

    def test_pass_requires_at_most_two_hints(self):
        svc = make_service(screening=10, config=self.config())
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        for _ in range(3):
            svc.request_hint(game.game_id)
        svc.submit_guess(game.game_id, game.true_class)  # correct but 3 hints
        profile = svc.players[player.player_id]
        assert profile.screening_failed == 1

    def test_export_marks_untrusted_players(self):
        svc = make_service(screening=10, config=self.config())
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class)
        svc.submit_labels(game.game_id, ["spire"])
        assert svc.export_labels()[0]["trusted"] is False  # only 1 screening so far


class TestLeaderboard:
    def test_order_and_tiebreak(self):
        svc = make_service()
        a = svc.create_session("a")
        b = svc.create_session("b")
        c = svc.create_session("c")
        game = svc.next_game(b.player_id, seed=0)
        svc.submit_guess(game.game_id, game.true_class)  # b: 100
        game = svc.next_game(c.player_id, seed=1)
        for _ in range(3):
            svc.request_hint(game.game_id)
        svc.submit_guess(game.game_id, game.true_class)  # c: 55
        board = svc.leaderboard(10)
        assert [p.nickname for p in board] == ["b", "c", "a"]
        # tie between two zero-score players: earlier session first
        d = svc.create_session("d")
        board = svc.leaderboard(10)
        assert [p.nickname for p in board] == ["b", "c", "a", "d"]
        assert [p.nickname for p in svc.leaderboard(1)] == ["b"]


class TestConcurrency:
    def test_parallel_players_keep_state_consistent(self, tmp_path):
        import threading

        log = tmp_path / "events.jsonl"
        svc = make_service(count=120, config=ServiceConfig(screening_cadence=0), log_path=log)
        players = [svc.create_session(f"p{i}") for i in range(6)]
        errors = []

        def play(profile, base_seed):
            try:
                for i in range(10):
                    game = svc.next_game(profile.player_id, seed=base_seed + i)
                    if i % 2:
                        svc.request_hint(game.game_id)
                    svc.submit_guess(game.game_id, game.true_class)
                    svc.submit_labels(game.game_id, ["thing"])
            except Exception as err:  # surfaced after join
                errors.append(err)

        threads = [
            threading.Thread(target=play, args=(profile, 1000 * i))
            for i, profile in enumerate(players)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        # every player finished all 10 games with consistent bookkeeping
        for profile in players:
            fresh = svc.players[profile.player_id]
            assert fresh.games_played == 10
            assert fresh.score == sum(
                g.points for g in svc.games.values() if g.player_id == profile.player_id
            )
        # the interleaved log still replays to the exact same state
        restored = GameService.replay(svc.pool, log)
        assert restored.snapshot() == svc.snapshot()
        seqs = [json.loads(line)["seq"] for line in log.read_text().splitlines() if line.strip()]
        assert seqs == list(range(1, len(seqs) + 1))


class TestDurability:
    def test_replay_reproduces_state_exactly(self, tmp_path):
        log = tmp_path / "events.jsonl"
        config = ServiceConfig(screening_cadence=2)
        svc = make_service(count=12, screening=4, config=config, log_path=log)
        player = svc.create_session("ada")
        rival = svc.create_session("bob")
        for i in range(6):
            game = svc.next_game(player.player_id, seed=i)
            if i % 3 == 2:
                svc.resign(game.game_id)
            else:
                for _ in range(i % 3):
                    svc.request_hint(game.game_id)
                svc.submit_guess(game.game_id, game.true_class)
            if game.state != "open":
                svc.submit_labels(game.game_id, [f"thing {i}", "spire"])
        game = svc.next_game(rival.player_id, seed=100)
        svc.submit_guess(game.game_id, game.true_class)

        restored = GameService.replay(svc.pool, log, config=config)
        assert restored.snapshot() == svc.snapshot()
        assert json.dumps(restored.snapshot(), sort_keys=True) == json.dumps(
            svc.snapshot(), sort_keys=True
        )

    def test_replay_detects_gaps(self, tmp_path):
        log = tmp_path / "events.jsonl"
        svc = make_service(log_path=log)
        svc.create_session("ada")
        svc.create_session("bob")
        lines = log.read_text().splitlines()
        log.write_text(lines[1] + "\n")  # drop the first event
        with pytest.raises(ValidationError, match="gap"):
            GameService.replay(svc.pool, log)

    def test_snapshot_plus_tail_replay(self, tmp_path):
        log = tmp_path / "events.jsonl"
        config = ServiceConfig(snapshot_every=3)
        svc = make_service(count=10, config=config, log_path=log)
        player = svc.create_session("ada")
        for i in range(4):
            game = svc.next_game(player.player_id, seed=i)
            svc.submit_guess(game.game_id, game.true_class)
        assert log.with_suffix(".snapshot.json").is_file()
        restored = GameService.replay(svc.pool, log, config=config)
        assert restored.snapshot() == svc.snapshot()


class TestConfig:
    def test_load_roundtrip(self, tmp_path):
        path = tmp_path / "service.json"
        path.write_text(
            json.dumps(
                {
                    "base_points": 80,
                    "hint_penalty": 10,
                    "screening_cadence": 4,
                    "ladder": [90, 80, 70, 60, 50, 40],
                    "port": 9000,
                }
            )
        )
        config = ServiceConfig.load(path)
        assert config.base_points == 80
        assert config.hint_penalty == 10
        assert config.ladder == [90, 80, 70, 60, 50, 40]
        assert config.trust_min_rate == 0.8  # defaults survive partial files

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "service.json"
        path.write_text(json.dumps({"no_such_knob": 1}))
        with pytest.raises(ValidationError, match="no_such_knob"):
            ServiceConfig.load(path)

    def test_scoring_constants_drive_points(self):
        config = ServiceConfig(base_points=50, hint_penalty=20)
        svc = make_service(config=config)
        player = svc.create_session("ada")
        game = svc.next_game(player.player_id, seed=0)
        svc.request_hint(game.game_id)
        game = svc.submit_guess(game.game_id, game.true_class)
        assert game.points == 30
        # a config with a steep penalty cannot go negative
        config2 = ServiceConfig(base_points=50, hint_penalty=20)
        svc2 = make_service(config=config2)
        p2 = svc2.create_session("bob")
        game2 = svc2.next_game(p2.player_id, seed=0)
        for _ in range(5):
            svc2.request_hint(game2.game_id)
        game2 = svc2.submit_guess(game2.game_id, game2.true_class)
        assert game2.points == 0


class TestHttpApi:
    @pytest.fixture
    def client(self, tmp_path):
        from fastapi.testclient import TestClient
        from layerlens.masks import save_png

        items = pool_items(6)
        for item in items:
            for ref in item.levels:
                save_png(tmp_path / ref, np.zeros((4, 4, 3)))
        pool = GamePool(items=items, class_names=list(CLASSES))
        service = GameService(pool, ServiceConfig())
        app = __import__("layerlens.service", fromlist=["create_app"]).create_app(
            service, image_root=tmp_path
        )
        return TestClient(app)

    def test_full_game_over_http(self, client):
        r = client.post("/api/session", json={"nickname": "ada"})
        assert r.status_code == 200
        player = r.json()["player_id"]
        r = client.get("/api/game/next", params={"player": player, "seed": 4})
        game = r.json()
        assert game["hint_level"] == 0
        assert len(game["options"]) == 5
        image = client.get(game["image"])
        assert image.status_code == 200
        assert image.headers["content-type"] == "image/png"
        r = client.post(f"/api/game/{game['game_id']}/hint", json={})
        assert r.json()["hint_level"] == 1
        # resume after "reload"
        r = client.get("/api/game/current", params={"player": player})
        assert r.json()["game_id"] == game["game_id"]
        r = client.post(f"/api/game/{game['game_id']}/guess", json={"class_name": game["options"][0]})
        assert r.status_code == 200
        body = r.json()
        assert body["state"] == "guessed"
        assert body["correct"] == (game["options"][0] == body["true_class"])
        r = client.post(f"/api/game/{game['game_id']}/labels", json={"labels": ["spire"]})
        assert r.status_code == 200
        assert r.json()["stored"] == 1
        r = client.get("/api/leaderboard")
        assert r.status_code == 200
        assert r.json()[0]["nickname"] == "ada"

    def test_errors_map_to_http_codes(self, client):
        assert client.post("/api/session", json={"nickname": ""}).status_code == 400
        assert client.get("/api/game/next", params={"player": "ghost"}).status_code == 404
        assert client.post("/api/game/ghost/resign").status_code == 404

    def test_only_composites_served(self, client, tmp_path):
        from layerlens.masks import save_png

        save_png(tmp_path / "secret.png", np.ones((4, 4, 3)))
        assert client.get("/api/image/secret.png").status_code == 404
        assert client.get("/api/image/../secret.png").status_code in (404, 400)
