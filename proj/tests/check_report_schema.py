"""Runs a small simulation through the CLI and validates its report against the published schema."""
import json
import pathlib
import subprocess
import sys

import jsonschema


def main() -> int:
    nsl, schema_path, work = sys.argv[1], pathlib.Path(sys.argv[2]), pathlib.Path(sys.argv[3])
    work.mkdir(parents=True, exist_ok=True)
    report = work / "report.json"
    subprocess.run(
        [nsl, "simulate", "--example", "1", "--reps", "2", "--n", "40", "--p", "50", "--K", "3",
         "--test-size", "200", "--grid-size", "10", "--seed", "5", "-o", str(report)],
        check=True,
    )
    schema = json.loads(schema_path.read_text())
    doc = json.loads(report.read_text())
    jsonschema.validate(doc, schema)
    print("report validates against", schema_path.name)

    # Lossless round trip: re-serializing the parsed document reproduces the same values.
    again = json.loads(json.dumps(doc))
    if again != doc:
        print("round trip changed the document")
        return 1
    subprocess.run([nsl, "report", "--input", str(report), "-o", str(work / "table.csv")], check=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
