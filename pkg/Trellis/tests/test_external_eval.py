import sys
import threading
import time

import pytest

from external_eval import (
    EvaluatorRequest,
    EvaluatorResponse,
    ProtocolError,
    external_evaluate,
    to_fitness_record,
)


def make_requests(count, max_steps=10, seed=0):
    encodings = [[i % 4, i % 3, i % 6, i % 8, (i * 3) % 8, i % 4] for i in range(count)]
    return [
        EvaluatorRequest(id=f"r{i}", encoding=enc, budget={"max_steps": max_steps, "seed": seed},
                         dataset_path="unused.json", task="NC")
        for i, enc in enumerate(encodings)
    ]


def test_echo_worker_values(worker_command):
    requests = make_requests(5)
    responses = external_evaluate(worker_command("--echo"), requests)
    assert [r.id for r in responses] == [q.id for q in requests]
    for request, response in zip(requests, responses):
        assert response.value == pytest.approx(sum(request.encoding) / 30)
        assert not response.diverged


def test_out_of_order_responses_are_matched_by_id(worker_command):
    requests = make_requests(6)
    responses = external_evaluate(worker_command("--echo", "--reverse"), requests)
    for request, response in zip(requests, responses):
        assert response.id == request.id
        assert response.value == pytest.approx(sum(request.encoding) / 30)


def test_early_exit_marks_the_rest_diverged(worker_command):
    requests = make_requests(6)
    responses = external_evaluate(worker_command("--echo", "--exit-after", "3"), requests)
    assert [r.diverged for r in responses] == [False] * 3 + [True] * 3
    assert all(r.value == 0.0 for r in responses[3:])


def test_hung_request_times_out_and_worker_restarts(worker_command):
    requests = make_requests(6)
    responses = external_evaluate(worker_command("--echo", "--hang-on", "r2"), requests,
                                  timeout_floor=1.0, initial_timeout=120.0)
    assert [r.diverged for r in responses] == [False, False, True, False, False, False]
    assert responses[4].value == pytest.approx(sum(requests[4].encoding) / 30)


def test_diverged_mae_requests_score_infinity(worker_command):
    requests = make_requests(2)
    responses = external_evaluate(worker_command("--echo", "--exit-after", "0"), requests,
                                  metric_name="mae")
    assert all(r.diverged and r.minimize and r.value == float("inf") for r in responses)


def test_malformed_response_line():
    command = [sys.executable, "-c",
               "import sys; sys.stdin.readline(); print('not json', flush=True)"]
    with pytest.raises(ProtocolError) as err:
        external_evaluate(command, make_requests(1))
    assert err.value.line == "not json"


def test_unexpected_id():
    command = [sys.executable, "-c",
               "import sys; sys.stdin.readline(); "
               "print('{\"id\": \"zz\", \"value\": 1, \"metric_name\": \"acc\", "
               "\"minimize\": false}', flush=True)"]
    with pytest.raises(ProtocolError):
        external_evaluate(command, make_requests(1))


def test_unknown_response_fields_are_ignored():
    response = EvaluatorResponse.model_validate(
        {"id": "a", "value": 0.5, "metric_name": "acc", "minimize": False, "gpu": "none"}
    )
    assert response.value == 0.5
    assert not response.diverged


def test_fitness_record_from_exchange():
    request = make_requests(1, seed=9)[0]
    response = EvaluatorResponse(id=request.id, value=0.8, metric_name="acc", minimize=False,
                                 wall_time=2.5)
    record = to_fitness_record(request, response)
    assert record.encoding.to_list() == request.encoding
    assert record.seed == 9
    assert record.id == request.id
    assert record.value == 0.8


def test_each_answer_is_reported_before_the_batch_ends(worker_command):
    requests = make_requests(6)
    seen = []
    driver = threading.Thread(
        target=external_evaluate,
        args=(worker_command("--echo", "--hang-on", "r3"), requests),
        kwargs={"timeout_floor": 10.0, "initial_timeout": 120.0,
                "on_response": lambda request, response: seen.append(response.id)},
        daemon=True,
    )
    driver.start()
    deadline = time.monotonic() + 8.0
    while len(seen) < 3 and time.monotonic() < deadline:
        time.sleep(0.05)
    assert seen == ["r0", "r1", "r2"]
    assert driver.is_alive()

    driver.join(timeout=60.0)
    assert not driver.is_alive()
    assert seen == ["r0", "r1", "r2", "r3", "r4", "r5"]


def test_worker_that_stops_reading_still_times_out(worker_command):
    # Far more request bytes than a pipe buffer holds.
    requests = make_requests(3000)
    result = {}
    driver = threading.Thread(
        target=lambda: result.update(responses=external_evaluate(
            worker_command("--echo", "--hang-on", "r0"), requests,
            timeout_floor=30.0, initial_timeout=2.0)),
        daemon=True,
    )
    driver.start()
    driver.join(timeout=60.0)
    assert not driver.is_alive()
    responses = result["responses"]
    assert responses[0].diverged
    assert not any(r.diverged for r in responses[1:])
