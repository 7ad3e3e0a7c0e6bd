"""Protocol parsing, validation, and round-trip tests."""

from __future__ import annotations

import random

import pytest

from vetgate.protocol import (
    DuplicateEvalName,
    EvalSpec,
    ParamError,
    ProtocolSyntaxError,
    TypedValue,
    Unit,
    UnknownEvaluationKind,
    UnsupportedVersion,
    VettingProtocol,
    parse_protocol,
    registry_describe,
    serialize_protocol,
)

# The reference document every deployment starts from, kept verbatim
# (including the truncated trailing comment) to pin parser fidelity.
REFERENCE_DOC = """\
name: "ML Training Node Vetting"
evals:
- name: "Check GPU"
  type: vetnode.evaluations.gpu_eval.GPUEval
  max_temp:  30 #(celsius)
  max_used_memory: 0.2 #(
- name: "NCCLBandwidth"
  type: vetnode.evaluations.nccl_eval.NCCLEval
  min_bandwidth: 90.0 #(GBps)
  requirements:
    - torch
- name: "CudaKernel"
  type: vetnode.evaluations.cuda_eval.CUDAEval
  requirements:
    - cuda-python
    - numpy
"""


def test_reference_document_parses():
    protocol = parse_protocol(REFERENCE_DOC)
    assert protocol.name == "ML Training Node Vetting"
    assert protocol.version == "1"
    assert len(protocol.evals) == 3

    gpu, nccl, cuda = protocol.evals
    assert gpu.kind == "GPUEval"
    assert gpu.params["max_temp"] == TypedValue(30, Unit.CELSIUS)
    assert gpu.params["max_used_memory"] == TypedValue(0.2, Unit.FRACTION)
    assert gpu.requirements == ()

    assert nccl.kind == "NCCLEval"
    assert nccl.params["min_bandwidth"] == TypedValue(90.0, Unit.GBPS)
    assert nccl.requirements == ("torch",)

    assert cuda.kind == "CUDAEval"
    assert cuda.params == {}
    assert cuda.requirements == ("cuda-python", "numpy")


def test_empty_protocol():
    protocol = parse_protocol('name: "x"\nevals: []\n')
    assert protocol.name == "x"
    assert protocol.evals == ()


def test_round_trip_reference():
    protocol = parse_protocol(REFERENCE_DOC)
    again = parse_protocol(serialize_protocol(protocol))
    assert again == protocol


def test_serialize_empty_evals_mentions_empty_list():
    doc = serialize_protocol(VettingProtocol(name="x", evals=()))
    assert "evals: []" in doc
    assert parse_protocol(doc) == VettingProtocol(name="x", evals=())


def test_unicode_round_trips_byte_identically():
    spec = EvalSpec(name="Überprüfung", kind="GPUEval",
                    params={"max_temp": TypedValue(40.0, Unit.CELSIUS)})
    protocol = VettingProtocol(name="Prüfung £µ", evals=(spec,))
    first = serialize_protocol(protocol)
    second = serialize_protocol(parse_protocol(first))
    assert first.encode("utf-8") == second.encode("utf-8")


def test_fraction_out_of_range_rejected():
    doc = REFERENCE_DOC.replace("max_used_memory: 0.2 #(", "max_used_memory: 1.5")
    with pytest.raises(ParamError) as err:
        parse_protocol(doc)
    assert "max_used_memory" in str(err.value)


def test_unknown_kind_names_offender():
    with pytest.raises(UnknownEvaluationKind) as err:
        parse_protocol('name: x\nevals:\n- name: a\n  type: pkg.mod.FooEval\n')
    assert "FooEval" in str(err.value)


def test_duplicate_eval_names_rejected():
    doc = (
        "name: x\nevals:\n"
        "- {name: a, type: CUDAEval}\n"
        "- {name: a, type: GPUEval}\n"
    )
    with pytest.raises(DuplicateEvalName):
        parse_protocol(doc)


def test_missing_mandatory_param():
    with pytest.raises(ParamError) as err:
        parse_protocol("name: x\nevals:\n- {name: bw, type: NCCLEval}\n")
    assert "min_bandwidth" in str(err.value)


def test_unknown_param_rejected():
    with pytest.raises(ParamError):
        parse_protocol("name: x\nevals:\n- {name: g, type: GPUEval, max_watts: 3}\n")


def test_non_numeric_threshold_rejected():
    with pytest.raises(ParamError):
        parse_protocol('name: x\nevals:\n- {name: g, type: GPUEval, max_temp: warm}\n')


def test_non_finite_threshold_rejected():
    with pytest.raises(ParamError):
        parse_protocol("name: x\nevals:\n- {name: b, type: NCCLEval, min_bandwidth: .inf}\n")


def test_syntax_error_carries_location():
    with pytest.raises(ProtocolSyntaxError) as err:
        parse_protocol("name: x\nevals:\n  - name: [unclosed\n")
    assert err.value.line is not None


def test_unknown_version_rejected():
    with pytest.raises(UnsupportedVersion):
        parse_protocol('name: x\nversion: "9"\nevals: []\n')


def test_version_defaults_to_one():
    assert parse_protocol("name: x\nevals: []\n").version == "1"


def test_unknown_top_level_key_rejected():
    with pytest.raises(ProtocolSyntaxError):
        parse_protocol("name: x\nevals: []\nextra: 1\n")


def test_case_insensitive_kind_resolution():
    protocol = parse_protocol("name: x\nevals:\n- {name: g, type: gpueval}\n")
    assert protocol.evals[0].kind == "GPUEval"


def test_registry_describe_gpu_eval():
    kind = registry_describe("GPUEval")
    temp = kind.param("max_temp")
    assert temp is not None
    assert (temp.unit, temp.mandatory, temp.minimum, temp.maximum) == (
        Unit.CELSIUS, False, 0.0, 150.0)
    mem = kind.param("max_used_memory")
    assert mem is not None
    assert (mem.unit, mem.mandatory, mem.minimum, mem.maximum) == (
        Unit.FRACTION, False, 0.0, 1.0)


def test_registry_describe_nccl_eval():
    kind = registry_describe("NCCLEval")
    bw = kind.param("min_bandwidth")
    assert bw is not None
    assert bw.unit is Unit.GBPS
    assert bw.mandatory
    assert bw.minimum == 0.0 and bw.min_exclusive


def test_registry_describe_unknown_kind():
    with pytest.raises(UnknownEvaluationKind):
        registry_describe("FooEval")


def _random_protocol(rng: random.Random) -> VettingProtocol:
    kinds = {
        "GPUEval": {"max_temp": (Unit.CELSIUS, 0.0, 150.0),
                    "max_used_memory": (Unit.FRACTION, 0.0, 1.0)},
        "NCCLEval": {"min_bandwidth": (Unit.GBPS, 0.5, 400.0)},
        "CUDAEval": {},
        "HostMemoryEval": {"min_free_memory": (Unit.FRACTION, 0.0, 1.0)},
        "ClockSkewEval": {"max_skew": (Unit.SECONDS, 0.0, 10.0)},
    }
    evals = []
    for i in range(rng.randrange(0, 6)):
        kind = rng.choice(sorted(kinds))
        params = {}
        for pname, (unit, lo, hi) in kinds[kind].items():
            mandatory = kind == "NCCLEval"
            if mandatory or rng.random() < 0.6:
                params[pname] = TypedValue(round(rng.uniform(lo, hi), 4), unit)
        reqs = tuple(rng.sample(["torch", "numpy", "cuda-python"], rng.randrange(0, 3)))
        evals.append(EvalSpec(name=f"eval-{i}", kind=kind, params=params,
                              requirements=reqs))
    return VettingProtocol(name=f"proto-{rng.randrange(1000)}", evals=tuple(evals))


def test_round_trip_random_protocols():
    rng = random.Random(99)
    for _ in range(100):
        protocol = _random_protocol(rng)
        assert parse_protocol(serialize_protocol(protocol)) == protocol
