from cphlab.cli.entry import run

run()
