"""軌道最適化の解とその近似器を合意ADMMで一緒に学習するパッケージ"""
