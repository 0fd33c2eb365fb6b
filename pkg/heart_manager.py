#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

import os
import sys

from dotenv import load_dotenv

__version__ = "0.1"

# --- Configuration Loading ---
try:
    from heart_manager.cli import main
    from heart_manager.helpers import configure_logging
except ImportError as e:
    print(
        "Error: Could not import the 'heart_manager' package. "
        f"Run from the repository root after: pip install -r requirements.txt. Details: {e}"
    )
    sys.exit(1)


if __name__ in {"__main__", "__mp_main__"}:
    load_dotenv(override=True)
    script_dir_manager = os.path.dirname(os.path.abspath(__file__))
    if script_dir_manager not in sys.path:
        sys.path.insert(0, script_dir_manager)

    # --- Logger Setup ---
    logger = configure_logging(os.getenv("HEART_LOG_DIR", os.path.join(script_dir_manager, "logs")))
    logger.info(f"Starting heart-manager v{__version__}.")

    sys.exit(main())
