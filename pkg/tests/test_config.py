import json

import pytest

from patchvote.config import (
    Config,
    dumps_canonical,
    from_dict,
    load_config,
    save_config,
)
from patchvote.errors import ConfigError


class TestDefaults:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "empty.json"
        p.write_text("")
        cfg = load_config(str(p))
        assert cfg == Config()

    def test_default_constants(self):
        cfg = Config()
        assert cfg.tau == 0.15
        assert cfg.weight_c == 24.0
        assert cfg.theta_pos == 0.4
        assert cfg.theta_neg == 0.6
        assert cfg.patch_fraction == pytest.approx(1.0 / 3.0)
        assert cfg.num_views == 16
        assert cfg.negatives_keep == 1024
        assert cfg.pose_bins == 16

    def test_env_var_pickup(self, tmp_path, monkeypatch):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"tau": 0.3}))
        monkeypatch.setenv("P2C_CONFIG", str(p))
        cfg = load_config()
        assert cfg.tau == 0.3

    def test_no_path_no_env_gives_defaults(self, monkeypatch):
        monkeypatch.delenv("P2C_CONFIG", raising=False)
        assert load_config() == Config()


class TestValidation:
    def test_tau_zero_rejected_naming_field(self):
        with pytest.raises(ConfigError, match="tau"):
            from_dict({"tau": 0.0})

    def test_negative_tau_rejected(self):
        with pytest.raises(ConfigError, match="tau"):
            from_dict({"tau": -1.0})

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError, match="foo"):
            from_dict({"foo": 1})

    def test_keep_exceeding_pool_rejected(self):
        with pytest.raises(ConfigError, match="negatives_keep"):
            from_dict({"negatives_pool": 8, "negatives_keep": 9})

    def test_patch_fraction_bounds(self):
        with pytest.raises(ConfigError, match="patch_fraction"):
            from_dict({"patch_fraction": 0.0})
        with pytest.raises(ConfigError, match="patch_fraction"):
            from_dict({"patch_fraction": 1.5})

    def test_counts_must_be_positive(self):
        with pytest.raises(ConfigError, match="hist_bins"):
            from_dict({"hist_bins": 0})

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(str(p))

    def test_non_object_root(self, tmp_path):
        p = tmp_path / "list.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(str(p))


class TestRoundTrip:
    def test_save_load_byte_identical(self, tmp_path):
        cfg = from_dict({"tau": 0.2, "kr": 12, "seed": 7})
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_config(cfg, str(p1))
        cfg2 = load_config(str(p1))
        save_config(cfg2, str(p2))
        assert p1.read_bytes() == p2.read_bytes()
        assert cfg == cfg2

    def test_canonical_text_is_sorted(self):
        text = dumps_canonical(Config())
        keys = list(json.loads(text).keys())
        assert keys == sorted(keys)

    def test_partial_override_keeps_other_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"kq": 3}))
        cfg = load_config(str(p))
        assert cfg.kq == 3
        assert cfg.kr == Config().kr
