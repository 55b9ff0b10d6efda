import logging

import numpy as np
import pytest

import gates
from blocks import (
    H, SWAP, X, Chain, ConstantGate, Control, Kron, Put, Rx, apply, blocks_equal, chain, control, mat,
    put, time_evolve,
)
from circuits import SHOR9_SCRIPT, heisenberg, shor9, shor9_error_xzz
from conftest import PAULI, dense_controlled
from errors import (
    ScriptError, ScriptParseError, ScriptRangeError, ScriptValidationError, SerializationError,
)
from matrices import PermMat, to_dense
from register import Register
from script import (
    emit_script, emit_statement, load_script, parse_script, parse_script_bytes, save_script,
    tokenize,
)


def _body(text, n=3):
    return parse_script(f"let nqubits={n}\n{text}\nend\n").children


def test_single_gate_line_is_a_put():
    (b,) = _body("1=>H")
    assert isinstance(b, Put)
    assert b.locs == (1,)
    assert isinstance(b.child, ConstantGate) and b.child.name == "H"


def test_several_gates_form_a_kron():
    (b,) = _body("1=>X, 3=>Z")
    assert isinstance(b, Kron)
    assert [locs for locs, _ in b.pairs] == [(1,), (3,)]
    assert np.allclose(to_dense(mat(b)), np.kron(PAULI["Z"], np.kron(np.eye(2), PAULI["X"])))


def test_controls():
    (b,) = _body("1=>C, 2=>X")
    assert isinstance(b, Control)
    assert (b.ctrl_locs, b.ctrl_config, b.locs) == ((1,), (1,), (2,))

    (b,) = _body("2=>C, 3=>C, 1=>X")
    assert np.allclose(to_dense(mat(b)), dense_controlled(3, 1, PAULI["X"], (2, 3), (1, 1)))

    (b,) = _body("1=>!C, 2=>X")
    assert b.ctrl_config == (0,)


def test_control_over_several_targets():
    (b,) = _body("1=>C, 2=>X, 3=>Z")
    assert isinstance(b, Control)
    assert b.locs == (2, 3)
    assert isinstance(b.child, Kron)
    expected = np.eye(8, dtype=complex)
    xz = np.kron(PAULI["Z"], PAULI["X"])
    odd = [1, 3, 5, 7]   # qubit 1 set
    expected[np.ix_(odd, odd)] = xz
    assert np.allclose(to_dense(mat(b)), expected)


def test_nested_chains_and_tuples():
    text = "begin\n    (1, 2)=>SWAP\n    3=>Rx(0.5)\nend\n2=>I\n"
    body = _body(text)
    assert isinstance(body[0], Chain)
    assert body[0].children[0].locs == (1, 2)
    assert isinstance(body[1].child, ConstantGate) and body[1].child.name == "I2"


def test_parametric_gates():
    (rx, sh, ph) = _body("1=>Rx(0.25)\n2=>shift(-1.5e-1)\n(1, 3)=>phase(0.3)")
    assert rx.child.theta == 0.25
    assert sh.child.theta == pytest.approx(-0.15)
    assert ph.child.nqubits == 2


def test_shor_script_matches_the_builder():
    parsed = parse_script(SHOR9_SCRIPT)
    built = shor9(shor9_error_xzz())
    a = Register(np.eye(512, dtype=np.complex128), 9, 9, nbatch=512)
    b = Register(np.eye(512, dtype=np.complex128), 9, 9, nbatch=512)
    apply(a, parsed)
    apply(b, built)
    assert np.allclose(a.state, b.state, atol=1e-10)


def test_shor_script_round_trip_is_a_fixpoint():
    first = parse_script(SHOR9_SCRIPT)
    text = emit_script(first)
    second = parse_script(text)
    assert blocks_equal(first, second)
    assert emit_script(second) == text


def test_round_trip_keeps_parameters():
    circuit = chain(3, put(3, 2, Rx(0.1234567)), control(3, -1, 3, Rx(2.5)), put(3, (1, 3), SWAP))
    again = parse_script(emit_script(circuit))
    assert blocks_equal(circuit, again)


def test_emit_statement():
    assert emit_statement(put(3, 1, H)) == "1=>H"
    assert emit_statement(control(2, -1, 2, X)) == "1=>!C, 2=>X"
    assert emit_statement(put(2, 2, Rx(0.5))) == "2=>Rx(0.5)"
    with pytest.raises(SerializationError):
        emit_statement(chain(1))
    with pytest.raises(SerializationError):
        emit_statement(put(2, (1, 2), time_evolve(heisenberg(2), 0.1)))


def test_final_end_is_optional():
    with_end = parse_script("let nqubits=2\n1=>X\nend\n")
    without = parse_script("let nqubits=2\n1=>X\n")
    assert blocks_equal(with_end, without)
    assert len(parse_script("let nqubits=2\n").children) == 0


def test_comments_are_ignored():
    circuit = parse_script("# a comment\nlet nqubits=1 # header\n1=>X # flip\nend\n")
    assert len(circuit.children) == 1


def test_version_mismatch_warns(caplog):
    with caplog.at_level(logging.WARNING):
        parse_script('let nqubits=1, version="0.1.0"\n1=>X\n')
    assert "0.1.0" in caplog.text


@pytest.mark.parametrize("text, error, line, column", [
    ("1=>X\n", ScriptParseError, 1, 1),
    ("let nqubits=0\n", ScriptValidationError, 1, 13),
    ("let nqubits=1.5\n", ScriptParseError, 1, 13),
    ("let nqubits=2\n1=>Q\n", ScriptParseError, 2, 4),
    ("let nqubits=2\n3=>X\n", ScriptRangeError, 2, 1),
    ("let nqubits=2\n1=>X @\n", ScriptParseError, 2, 6),
    ("let nqubits=2\n1=>C\n", ScriptValidationError, 2, 1),
    ("let nqubits=2\n1=>X, 1=>Z\n", ScriptValidationError, 2, 7),
    ("let nqubits=2\nbegin\n1=>X\n", ScriptParseError, 2, 1),
    ("let nqubits=2\nend\n1=>X\n", ScriptParseError, 3, 1),
    ("let nqubits=2\n1=>Rx\n", ScriptParseError, 2, 4),
    ("let nqubits=2\n1=>X(0.3)\n", ScriptParseError, 2, 4),
    ("let nqubits=2\n(1, 2)=>Rx(0.3)\n", ScriptValidationError, 2, 9),
    ("let nqubits=2\n1=>SWAP\n", ScriptValidationError, 2, 4),
])
def test_errors_carry_positions(text, error, line, column):
    with pytest.raises(error) as info:
        parse_script(text)
    assert (info.value.line, info.value.column) == (line, column)


def test_invalid_utf8_is_a_parse_error():
    with pytest.raises(ScriptParseError) as info:
        parse_script_bytes(b"let nqubits=1\n1=>X \xff\n")
    assert (info.value.line, info.value.column) == (2, 6)


def test_tokens_have_positions():
    toks = tokenize("let nqubits=2\n  1=>X")
    arrow = next(t for t in toks if t.kind == "ARROW")
    assert (arrow.line, arrow.column) == (2, 4)


def test_registered_gates_are_usable():
    gates.register_gate("ISWAP", PermMat.from_one_based([1, 3, 2, 4], [1, 1j, 1j, 1]))
    try:
        (b,) = _body("(1, 2)=>ISWAP")
        assert b.child.name == "ISWAP"
        assert emit_statement(b) == "(1, 2)=>ISWAP"
    finally:
        gates.unregister_gate("ISWAP")


def test_save_and_load(tmp_path):
    circuit = parse_script(SHOR9_SCRIPT)
    path = tmp_path / "shor.yqs"
    save_script(circuit, path)
    assert blocks_equal(load_script(path), circuit)


def test_mutated_scripts_never_crash():
    rng = np.random.default_rng(17)
    alphabet = list(b"0123456789=>,()!CXZHR .\n#beginendlt\"")
    source = SHOR9_SCRIPT.encode("utf-8")
    rejected = 0
    for _ in range(10_000):
        data = bytearray(source)
        for _ in range(rng.integers(1, 4)):
            pos = int(rng.integers(0, len(data)))
            # half of the new bytes are arbitrary, the rest come from the grammar
            if rng.random() < 0.5:
                byte = int(rng.integers(0, 256))
            else:
                byte = int(rng.choice(alphabet))
            action = rng.integers(0, 3)
            if action == 0:
                del data[pos]
            elif action == 1:
                data.insert(pos, byte)
            else:
                data[pos] = byte
        try:
            parse_script_bytes(bytes(data))
        except ScriptError:
            rejected += 1
    assert rejected > 0
