from recrank.cli import run

run()
