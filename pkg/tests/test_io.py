import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qclt import __version__
from qclt.exceptions import AssumptionViolation, ConfigError
from qclt.io import (DEFAULT_TOLERANCES, RandomMdpSpec, fixture_text, generate_mdp,
                     header_line, load_config, load_fixture, load_fixture_text, load_spec,
                     parse_config, read_csv, read_yaml, resolve_output_dir, write_csv,
                     write_yaml)
from qclt.chain import build_joint_chain

GOOD = """\
fixture: builtin:default
schedule:
  alpha: 5
  b: 12
  beta: 2/3
K_grid: [1000, 10000, 100000, 1000000]
replicas: 2000
master_seed: 3
"""

FIXTURE = """\
n_states: 2
n_actions: 1
gamma: 0.5
transition:
  - [[0.5, 0.5]]
  - [[0.2, 0.7]]
reward: [[0.1], [0.2]]
"""


def error_of(text):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    return err.value


class TestConfig:
    def test_defaults_and_fraction(self):
        cfg = parse_config(GOOD)
        assert cfg.schedule.beta == 2 / 3
        assert cfg.zeta_grid == tuple(round(0.1 * i, 12) for i in range(1, 11))
        assert cfg.tolerances == DEFAULT_TOLERANCES
        assert cfg.load_mdp().name == "default"

    def test_round_trip(self):
        cfg = parse_config(GOOD)
        again = parse_config(cfg.to_yaml())
        assert again == cfg
        assert "beta: 2/3" in cfg.to_yaml()

    def test_hash_ignores_output_dir(self):
        cfg = parse_config(GOOD)
        assert cfg.config_hash() == cfg.with_overrides(output_dir="/tmp/x").config_hash()
        assert cfg.config_hash() != cfg.with_overrides(master_seed=4).config_hash()
        assert len(cfg.config_hash()) == 16

    def test_shipped_configs(self):
        clt = load_config("builtin:default_clt")
        fclt = load_config("builtin:default_fclt")
        assert clt.replicas == fclt.replicas == 2000
        assert clt.K_grid == (1000, 10000, 100000, 1000000)
        assert len(fclt.zeta_grid) == 10

    def test_wrong_type_is_line_anchored(self):
        err = error_of(GOOD.replace("replicas: 2000", "replicas: many"))
        assert err.field == "replicas" and err.line == 7

    def test_nested_field_line(self):
        err = error_of(GOOD.replace("alpha: 5", "alpha: fast"))
        assert err.field == "schedule.alpha" and err.line == 3

    def test_list_entry_line(self):
        err = error_of(GOOD.replace("100000, 1000000", "-5, 1000000"))
        assert err.field == "K_grid[2]" and err.line == 6

    def test_zero_replicas(self):
        assert error_of(GOOD.replace("replicas: 2000", "replicas: 0")).field == "replicas"

    def test_beta_outside_clt_range(self):
        low = GOOD.replace("alpha: 5", "alpha: 1").replace("beta: 2/3", "beta: 0.4")
        err = error_of(low)
        assert err.field == "schedule.beta" and err.line == 5
        cfg = parse_config(low + "diagnostic: true\n")
        assert cfg.diagnostic

    def test_initial_stepsize_above_one(self):
        assert error_of(GOOD.replace("alpha: 5", "alpha: 50")).field == "schedule"

    def test_missing_fixture(self):
        assert error_of(GOOD.replace("fixture: builtin:default\n", "")).field == "fixture"

    def test_unsorted_grid(self):
        assert error_of(GOOD.replace("[1000, 10000", "[10000, 1000")).field == "K_grid"

    def test_zeta_must_end_at_one(self):
        assert error_of(GOOD + "zeta_grid: [0.5, 0.9]\n").field == "zeta_grid"

    def test_seed_range(self):
        assert error_of(GOOD.replace("master_seed: 3", f"master_seed: {2**64}")).field \
            == "master_seed"

    def test_malformed_yaml(self):
        err = error_of("fixture: [unclosed\n")
        assert err.line is not None

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_relative_fixture(self, tmp_path):
        (tmp_path / "f.yaml").write_text(FIXTURE.replace("0.7", "0.8"))
        (tmp_path / "c.yaml").write_text(GOOD.replace("builtin:default", "f.yaml"))
        assert load_config(tmp_path / "c.yaml").load_mdp().n_states == 2


class TestFixtures:
    def test_builtin(self):
        m = load_fixture("builtin:default")
        assert m.discount == 0.6 and m.n_pairs == 6

    def test_unknown_builtin(self):
        with pytest.raises(ConfigError):
            load_fixture("builtin:nope")

    def test_bad_row_points_at_row(self):
        with pytest.raises(ConfigError) as err:
            load_fixture_text(FIXTURE)
        assert err.value.field == "transition[1][0]" and err.value.line == 6

    def test_reward_range(self):
        with pytest.raises(ConfigError, match="rewards"):
            load_fixture_text(FIXTURE.replace("0.7", "0.8").replace("0.2]]", "1.2]]"))

    def test_text_round_trip(self, default_mdp):
        text = fixture_text(default_mdp, "# header")
        back = load_fixture_text(text)
        np.testing.assert_array_equal(back.transition, default_mdp.transition)
        np.testing.assert_array_equal(back.reward, default_mdp.reward)
        assert fixture_text(back, "# header") == text


class TestGenerator:
    def test_deterministic(self):
        spec = RandomMdpSpec(5, 3, sparsity=0.5, reward_seed=1, transition_seed=2)
        assert fixture_text(generate_mdp(spec)) == fixture_text(generate_mdp(spec))

    def test_seeds_are_independent(self):
        a = generate_mdp(RandomMdpSpec(4, 2, reward_seed=1, transition_seed=2))
        b = generate_mdp(RandomMdpSpec(4, 2, reward_seed=9, transition_seed=2))
        np.testing.assert_array_equal(a.transition, b.transition)
        assert not np.array_equal(a.reward, b.reward)

    @given(st.integers(1, 6), st.integers(1, 3), st.floats(0.2, 1.0), st.integers(0, 10**6))
    def test_valid_chains(self, n_s, n_a, sparsity, seed):
        try:
            m = generate_mdp(RandomMdpSpec(n_s, n_a, sparsity, seed, seed + 1))
        except AssumptionViolation:
            return
        assert build_joint_chain(m).assumption_ok
        assert np.all(np.count_nonzero(m.transition, axis=-1)
                      <= max(1, int(np.ceil(sparsity * n_s))))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            RandomMdpSpec(0, 2)
        with pytest.raises(ConfigError):
            RandomMdpSpec(3, 2, sparsity=0.0)

    def test_load_spec(self, tmp_path):
        p = tmp_path / "s.yaml"
        p.write_text("n_states: 3\nn_actions: 2\ngamma: 0.8\n")
        assert load_spec(p) == RandomMdpSpec(3, 2, gamma=0.8)
        with pytest.raises(ConfigError):
            load_spec(tmp_path / "missing.yaml")


class TestWriters:
    def test_csv_round_trip_17_digits(self, tmp_path):
        vals = [0.1, 1 / 3, np.pi * 1e-300, -2.5e17, np.nextafter(1.0, 2.0)]
        p = tmp_path / "x.csv"
        write_csv(p, ["i", "v"], [[i, v] for i, v in enumerate(vals)], "h")
        cols, rows = read_csv(p)
        assert cols == ["i", "v"]
        assert [float(r[1]) for r in rows] == vals

    def test_header_lines(self, tmp_path):
        p = tmp_path / "x.yaml"
        write_yaml(p, {"a": np.float64(1.5), "b": np.arange(2)}, "abcd")
        first = p.read_text().splitlines()[0]
        assert first == header_line("abcd") == f"# qclt {__version__} config=abcd"
        assert read_yaml(p) == {"a": 1.5, "b": [0, 1]}

    def test_output_dir_resolution(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QCLT_OUTPUT_DIR", str(tmp_path / "env"))
        assert resolve_output_dir() == tmp_path / "env"
        assert resolve_output_dir(str(tmp_path / "arg")) == tmp_path / "arg"
        monkeypatch.delenv("QCLT_OUTPUT_DIR")
        monkeypatch.chdir(tmp_path)
        assert resolve_output_dir().name == "qclt_output"

    def test_unwritable_output(self, tmp_path):
        f = tmp_path / "file"
        f.write_text("")
        with pytest.raises(ConfigError):
            resolve_output_dir(str(f / "sub"))
