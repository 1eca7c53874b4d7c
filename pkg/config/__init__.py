# RCTrans Desk - Configuration
# Default run configuration (run_config.json)
