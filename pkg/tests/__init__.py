# RCTrans Desk - Test Suite
# Unit, property-based and acceptance tests
