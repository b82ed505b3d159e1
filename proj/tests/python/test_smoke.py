"""Smoke tests for the pybind11 surface; heavy coverage lives in the C++ suites."""

import json
import math

import pytest

import opalign

SURVEY_DOC = {
    "survey_id": "py",
    "questions": [
        {
            "qid": "q1",
            "text": "How concerned are you about data privacy?",
            "topics": ["privacy"],
            "options": [
                {"label": "A", "text": "A great deal", "kind": "ordinal"},
                {"label": "B", "text": "Some", "kind": "ordinal"},
                {"label": "C", "text": "Not at all", "kind": "ordinal"},
                {"label": "D", "text": "Refused", "kind": "refusal"},
            ],
        }
    ],
    "demographics": [
        {
            "name": "POLPARTY",
            "text": "In politics today, do you consider yourself a",
            "groups": ["Republican", "Democrat"],
        }
    ],
}

MICRODATA = (
    "respondent_id,weight,POLPARTY,q1\n"
    "r1,0.5,Democrat,A\n"
    "r2,0.3,Democrat,A\n"
    "r3,0.2,Republican,B\n"
)


def test_wasserstein_against_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    support = [1.0, 2.0, 3.0, 4.0]
    d1 = [0.1, 0.4, 0.3, 0.2]
    d2 = [0.25, 0.25, 0.25, 0.25]
    ours = opalign.wasserstein_1d(d1, d2, support)
    reference = scipy_stats.wasserstein_distance(support, support, d1, d2)
    assert ours == pytest.approx(reference, abs=1e-12)


def test_alignment_and_entropy():
    pairs = [([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 3.0], 3)]
    assert opalign.alignment(pairs) == pytest.approx(0.0)
    assert opalign.entropy([0.25] * 4) == pytest.approx(math.log(4))


def test_temperature_scale_and_consistency():
    assert opalign.temperature_scale([0.6, 0.4], 0.5) == pytest.approx(
        [0.36 / 0.52, 0.16 / 0.52]
    )
    c, best, per_topic = opalign.consistency(
        ["X", "Y"], ["t1", "t2", "t3"], [[0.9, 0.8, 0.3], [0.5, 0.5, 0.7]]
    )
    assert c == pytest.approx(2 / 3)
    assert best == "X"
    assert per_topic == ["X", "X", "Y"]


def test_survey_loading_and_aggregation():
    survey = opalign.load_survey(json.dumps(SURVEY_DOC))
    assert survey.questions[0].non_refusal_count() == 3
    panel = opalign.load_responses(MICRODATA, survey)
    assert len(panel) == 3
    dist = opalign.aggregate_distribution(panel, survey.questions[0])
    assert dist.probs == pytest.approx([0.8, 0.2, 0.0])
    democrats = opalign.aggregate_distribution(
        panel, survey.questions[0], opalign.GroupFilter.group("POLPARTY", "Democrat")
    )
    assert democrats.probs == pytest.approx([1.0, 0.0, 0.0])


def test_prompt_build_and_extraction():
    survey = opalign.load_survey(json.dumps(SURVEY_DOC))
    question = survey.questions[0]
    context = opalign.make_context(
        opalign.ContextKind.PORTRAY, survey.demographics[0], "Democrat"
    )
    spec = opalign.build_prompt(
        question, context, opalign.InstructionVariant.GENERAL, [2, 0, 1]
    )
    assert "as if you were Democrat" in spec.text
    assert spec.text.index("as if you were") < spec.text.index("Question:")
    assert "A. Not at all" in spec.text  # option originally third is now labeled A
    assert spec.text.rstrip().endswith("Answer:")

    probe = opalign.ProbeResult({"B": math.log(0.5), "C": math.log(0.3)})
    completed, rescaled = opalign.bound_missing_options(probe, ["A", "B", "C"])
    assert completed["A"] == pytest.approx(0.2)
    assert not rescaled

    dist = opalign.extract_distribution(completed, question, [2, 0, 1])
    assert sum(dist.probs) == pytest.approx(1.0)
    # Presented-B (prob 0.5) is the original first option.
    assert dist.probs[0] == pytest.approx(0.5)


def test_errors_are_typed():
    bad = dict(SURVEY_DOC)
    bad["questions"] = [dict(SURVEY_DOC["questions"][0])]
    bad["questions"][0]["options"] = [
        {"label": "A", "text": "x", "kind": "refusal"},
        {"label": "B", "text": "y", "kind": "ordinal"},
        {"label": "C", "text": "z", "kind": "ordinal"},
    ]
    with pytest.raises(opalign.InvariantError):
        opalign.load_survey(json.dumps(bad))
    with pytest.raises(opalign.BadTemperatureError):
        opalign.temperature_scale([1.0], 0.0)


def test_full_run_from_config(tmp_path):
    survey_path = tmp_path / "survey.json"
    microdata_path = tmp_path / "microdata.csv"
    survey_path.write_text(json.dumps(SURVEY_DOC))
    microdata_path.write_text(MICRODATA)
    config = {
        "surveys": [str(survey_path)],
        "microdata": [str(microdata_path)],
        "output_dir": str(tmp_path / "out"),
        "steering_subset_size": 1,
        "steering_groups": [{"attribute": "POLPARTY", "group": "Democrat"}],
        "models": [
            {"provider": "mock-uniform", "model_id": "uniform-1", "top_k": 8},
            {
                "provider": "mock-mimic",
                "model_id": "mimic-democrat",
                "top_k": 8,
                "mimic": {"attribute": "POLPARTY", "group": "Democrat"},
            },
        ],
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))

    result = opalign.run(str(config_path))
    assert result["provider_calls"] > 0
    written = {p.split("/")[-1] for p in result["written_files"]}
    assert {
        "representativeness.csv",
        "steerability.csv",
        "consistency.csv",
        "topic_best_group.csv",
        "refusal.csv",
        "entropy.csv",
        "diagnostics.csv",
        "manifest.json",
    } <= written

    by_model = {r["model_id"]: r for r in result["reports"]}
    assert by_model["mimic-democrat"]["group_r"][("POLPARTY", "Democrat")] == pytest.approx(
        1.0, abs=1e-6
    )
