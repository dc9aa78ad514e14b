from c2csim.cli import main

raise SystemExit(main())
