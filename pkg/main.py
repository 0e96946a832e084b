# main.py
from clims.cli import cli

if __name__ == "__main__":
    cli()
