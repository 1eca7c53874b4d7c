# RCTrans Desk - Radar-Camera 3D Detection at Desk Scale
# Main source code package
