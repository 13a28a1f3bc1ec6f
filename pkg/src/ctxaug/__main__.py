from ctxaug.cli import main

main()
