import json
import threading

from tokenguard.persistence import FileBackend, MemoryBackend


def test_memory_cas_and_copies():
    b = MemoryBackend()
    assert b.compare_and_set("ns", "k", None, {"v": 1})
    assert not b.compare_and_set("ns", "k", None, {"v": 2})
    assert not b.compare_and_set("ns", "k", {"v": 0}, {"v": 2})
    assert b.compare_and_set("ns", "k", {"v": 1}, {"v": 2})
    got = b.get("ns", "k")
    got["v"] = 99
    assert b.get("ns", "k") == {"v": 2}
    assert b.delete("ns", "k") and not b.delete("ns", "k")
    assert b.append("log", 1) == 1 and b.append("log", 2) == 2
    assert b.read_log("log") == [1, 2]


def test_cas_is_atomic_under_contention():
    b = MemoryBackend()
    b.put("ns", "counter", 0)
    wins = []

    def worker():
        for _ in range(200):
            while True:
                cur = b.get("ns", "counter")
                if b.compare_and_set("ns", "counter", cur, cur + 1):
                    wins.append(1)
                    break

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert b.get("ns", "counter") == 800 == len(wins)


def test_file_backend_survives_restart(tmp_path):
    b = FileBackend(tmp_path, fsync=False, snapshot_every=3)
    for i in range(7):
        b.put("ns", f"k{i}", i)
    b.append("log", "a")
    b.delete("ns", "k0")
    # simulate a crash: no close, no final snapshot
    b._journal.flush()
    again = FileBackend(tmp_path, fsync=False)
    assert again.items("ns") == {f"k{i}": i for i in range(1, 7)}
    assert again.read_log("log") == ["a"]


def test_torn_journal_tail_is_ignored(tmp_path):
    b = FileBackend(tmp_path, fsync=False)
    b.put("ns", "a", 1)
    b._journal.flush()
    with open(tmp_path / FileBackend.JOURNAL, "a") as fh:
        fh.write('{"op":"put","ns":"ns","key":"b","val')
    again = FileBackend(tmp_path, fsync=False)
    assert again.items("ns") == {"a": 1}


def test_stale_journal_generation_is_skipped(tmp_path):
    b = FileBackend(tmp_path, fsync=False)
    b.put("ns", "a", 1)
    b.close()
    # a leftover journal from before the last snapshot must not be replayed
    journal = tmp_path / FileBackend.JOURNAL
    journal.write_text(json.dumps({"op": "generation", "value": 0}) + "\n"
                       + json.dumps({"op": "delete", "ns": "ns", "key": "a"}) + "\n")
    assert FileBackend(tmp_path, fsync=False).items("ns") == {"a": 1}


def test_close_is_idempotent(tmp_path):
    b = FileBackend(tmp_path)
    b.put("ns", "a", [1, 2])
    b.close()
    b.close()
    assert FileBackend(tmp_path).get("ns", "a") == [1, 2]
