from plumeflow.cli import main
import sys
sys.exit(main())
