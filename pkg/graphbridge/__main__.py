from graphbridge import cli

cli.main_group.main(prog_name="graphbridge")
