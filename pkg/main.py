import logging
import sys

from controllers.main_controller import MainController


def main():
    # Configure logging
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
    )

    # Create and run main controller
    controller = MainController()
    sys.exit(controller.run())


if __name__ == "__main__":
    main()
