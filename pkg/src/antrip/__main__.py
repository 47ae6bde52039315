from antrip.cli import main

main()
