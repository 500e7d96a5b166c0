"""Exception taxonomy contracts."""

import pytest

import fuselab.errors as errors
from fuselab.errors import ConfigError, FuselabError, IdentifiabilityError, ParseError


def test_every_error_derives_from_the_base():
    for name in errors.__all__:
        cls = getattr(errors, name)
        assert issubclass(cls, FuselabError)


def test_parse_error_location():
    err = ParseError("bad field", path="data.csv", row=7)
    assert err.path == "data.csv"
    assert err.row == 7
    assert "data.csv" in str(err) and "row 7" in str(err)
    bare = ParseError("empty")
    assert bare.path is None and str(bare) == "empty"


def test_config_error_key():
    err = ConfigError("out of range", "n_rounds")
    assert err.key == "n_rounds"
    assert "n_rounds" in str(err)
    assert ConfigError("plain").key is None


def test_identifiability_error_columns():
    assert IdentifiabilityError("collinear", [2, 5]).columns == [2, 5]
    assert IdentifiabilityError("collinear").columns == []


def test_errors_are_catchable_as_value_errors():
    with pytest.raises(ValueError):
        raise ParseError("x")
    with pytest.raises(FuselabError):
        raise ConfigError("y")
